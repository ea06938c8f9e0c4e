use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use miditune::engine::{CorrectionConfig, LatencyClock};
use miditune::neural::LstmModel;
use miditune::representation::Level;
use miditune_service::{Connection, Server, ServerOptions, ServiceError, Transport};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn model() -> Arc<LstmModel> {
    Arc::new(LstmModel::random(Level::Full, 110, 16, 16, 7))
}

fn options(transport: Transport) -> ServerOptions {
    ServerOptions {
        defaults: CorrectionConfig { warmup: 4, history: 8, ..Default::default() },
        clock: LatencyClock::Fixed(0),
        transport,
    }
}

async fn start(transport: Transport) -> String {
    let server = Server::bind("127.0.0.1:0", Some(model()), options(transport)).await.unwrap();
    let addr = server.local_addr().unwrap().to_string();
    tokio::spawn(server.run());
    addr
}

async fn ws_client(addr: &str) -> Ws {
    connect_async(format!("ws://{addr}")).await.unwrap().0
}

/// Replies expected for a client frame: one per note_on, config and reset,
/// none for note_off.
fn expects_reply(frame: &str) -> bool {
    !frame.contains(r#""type":"note_off""#)
}

async fn ws_exchange(ws: &mut Ws, frames: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for f in frames {
        ws.send(Message::Text(f.clone())).await.unwrap();
        if expects_reply(f) {
            out.push(next_text(ws).await);
        }
    }
    out
}

async fn next_text(ws: &mut Ws) -> String {
    let msg = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("reply in time").unwrap().unwrap();
    match msg {
        Message::Text(t) => t,
        other => panic!("unexpected frame {other:?}"),
    }
}

fn script() -> Vec<String> {
    std::fs::read_to_string(golden("session.client.jsonl")).unwrap().lines().map(str::to_string).collect()
}

fn offline(frames: &[String], model: Arc<LstmModel>) -> Vec<String> {
    let opts = options(Transport::WebSocket);
    let mut conn = Connection::new(Some(model), opts.defaults, opts.clock).unwrap();
    frames.iter().flat_map(|f| conn.handle_text(f)).collect()
}

#[tokio::test]
async fn golden_transcript_over_websocket() {
    let addr = start(Transport::WebSocket).await;
    let mut ws = ws_client(&addr).await;
    let frames = script();
    let got = ws_exchange(&mut ws, &frames).await.join("\n") + "\n";
    let path = golden("session.server.jsonl");
    if std::env::var_os("MIDITUNE_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &got).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap();
    assert_eq!(got, want);
    assert_eq!(want.lines().filter(|l| l.contains(r#""type":"decision""#)).count(), 21);
}

#[tokio::test]
async fn ndjson_transport_speaks_the_same_protocol() {
    let addr = start(Transport::Ndjson).await;
    let stream = TcpStream::connect(&addr).await.unwrap();
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    let frames = script();
    let mut got = Vec::new();
    for f in &frames {
        write.write_all(format!("{f}\n").as_bytes()).await.unwrap();
        if expects_reply(f) {
            got.push(lines.next_line().await.unwrap().unwrap());
        }
    }
    assert_eq!(got.join("\n") + "\n", std::fs::read_to_string(golden("session.server.jsonl")).unwrap());
}

fn session_frames(aid: f64, pitches: &[u8]) -> Vec<String> {
    let mut frames = vec![format!(r#"{{"type":"config","aid_level":{aid},"threshold":0.05}}"#)];
    for (i, p) in pitches.iter().enumerate() {
        let t = i * 200;
        frames.push(format!(r#"{{"type":"note_on","pitch":{p},"velocity":70,"t_ms":{t}}}"#));
        frames.push(format!(r#"{{"type":"note_off","pitch":{p},"t_ms":{}}}"#, t + 150));
    }
    frames
}

#[tokio::test]
async fn concurrent_sessions_are_isolated() {
    let addr = start(Transport::WebSocket).await;
    let pitches: Vec<u8> = (0..40).map(|i| 48 + (i * 7 % 24) as u8).collect();
    let a_frames = session_frames(1.0, &pitches);
    let b_frames = session_frames(0.3, &pitches);
    let (mut a, mut b) = (ws_client(&addr).await, ws_client(&addr).await);
    // Interleave frame by frame so both sessions are live at once.
    let (mut a_out, mut b_out) = (Vec::new(), Vec::new());
    for (fa, fb) in a_frames.iter().zip(&b_frames) {
        a_out.extend(ws_exchange(&mut a, std::slice::from_ref(fa)).await);
        b_out.extend(ws_exchange(&mut b, std::slice::from_ref(fb)).await);
    }
    assert_eq!(a_out, offline(&a_frames, model()));
    assert_eq!(b_out, offline(&b_frames, model()));
    assert_ne!(a_out, b_out);
}

#[tokio::test]
async fn malformed_frames_are_contained() {
    let addr = start(Transport::WebSocket).await;
    let frames = session_frames(1.0, &[60, 62, 64, 65, 67, 69]);
    let mut good = ws_client(&addr).await;
    let mut bad = ws_client(&addr).await;
    let half = frames.len() / 2;
    let mut out = ws_exchange(&mut good, &frames[..half]).await;

    for junk in ["{", "[]", r#"{"type":"note_on"}"#, r#"{"type":"note_on","pitch":300,"velocity":1,"t_ms":0}"#, "\u{0}"] {
        bad.send(Message::Text(junk.to_string())).await.unwrap();
        assert!(next_text(&mut bad).await.starts_with(r#"{"type":"error""#), "{junk}");
    }
    bad.send(Message::Binary(vec![0xff, 0x00])).await.unwrap();
    assert!(next_text(&mut bad).await.contains("bad_message"));
    // The erroring session is still usable.
    let replies = ws_exchange(&mut bad, &frames[..3]).await;
    assert_eq!(replies, offline(&frames[..3], model()));
    // Dropping a socket mid-stream without a close handshake.
    drop(bad);

    out.extend(ws_exchange(&mut good, &frames[half..]).await);
    assert_eq!(out, offline(&frames, model()));
    let mut late = ws_client(&addr).await;
    assert_eq!(ws_exchange(&mut late, &frames).await, offline(&frames, model()));
}

#[tokio::test]
async fn startup_errors() {
    let taken = Server::bind("127.0.0.1:0", Some(model()), options(Transport::WebSocket)).await.unwrap();
    let addr = taken.local_addr().unwrap();
    assert!(matches!(Server::bind(addr, Some(model()), options(Transport::WebSocket)).await, Err(ServiceError::Bind(_))));
    assert!(matches!(Server::bind("127.0.0.1:0", None, options(Transport::WebSocket)).await, Err(ServiceError::Defaults(_))));
}
