//! Shared fixtures: a local HTTP stub and synthetic video suites.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use vidgraph_core::gateway::{Script, ScriptEntry};
use vidgraph_core::store::{QAItem, VideoBundle};

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl RecordedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct StubResponse {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
    /// Advertise more bytes than are sent, then hang up.
    pub truncate: bool,
}

impl StubResponse {
    pub fn json(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            body: body.into(),
            delay: Duration::ZERO,
            truncate: false,
        }
    }

    pub fn chat(content: &str) -> Self {
        let body = serde_json::json!({
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
        });
        Self::json(200, body.to_string())
    }

    pub fn embedding(v: &[f64]) -> Self {
        let body = serde_json::json!({"data": [{"index": 0, "embedding": v}]});
        Self::json(200, body.to_string())
    }
}

type Responder = dyn Fn(&RecordedRequest, usize) -> StubResponse + Send + Sync;

/// Minimal HTTP/1.1 server on 127.0.0.1. Every connection carries one
/// request; the responder sees the request and its 0-based arrival index.
pub struct StubServer {
    port: u16,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    stop: Arc<AtomicBool>,
}

fn read_request(stream: &TcpStream) -> Option<RecordedRequest> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        headers.push((k.trim().to_string(), v.trim().to_string()));
    }
    let len: usize = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).ok()?;
    Some(RecordedRequest {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    })
}

impl StubServer {
    pub fn start(responder: impl Fn(&RecordedRequest, usize) -> StubResponse + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let port = listener.local_addr().unwrap().port();
        let requests: Arc<Mutex<Vec<RecordedRequest>>> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let responder: Arc<Responder> = Arc::new(responder);
        {
            let (requests, stop) = (requests.clone(), stop.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(mut stream) = stream else { continue };
                    let (requests, responder) = (requests.clone(), responder.clone());
                    thread::spawn(move || {
                        let Some(req) = read_request(&stream) else { return };
                        let index = {
                            let mut all = requests.lock().unwrap();
                            all.push(req.clone());
                            all.len() - 1
                        };
                        let resp = responder(&req, index);
                        thread::sleep(resp.delay);
                        let advertised = if resp.truncate { resp.body.len() + 100 } else { resp.body.len() };
                        let head = format!(
                            "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {advertised}\r\nConnection: close\r\n\r\n",
                            resp.status
                        );
                        let _ = stream.write_all(head.as_bytes());
                        let _ = stream.write_all(resp.body.as_bytes());
                        let _ = stream.flush();
                    });
                }
            });
        }
        Self { port, requests, stop }
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(("127.0.0.1", self.port));
    }
}

pub fn entry(round: Option<u32>, contains: &[&str], reply: &str) -> ScriptEntry {
    ScriptEntry {
        round,
        contains: contains.iter().map(|s| s.to_string()).collect(),
        reply: reply.to_string(),
    }
}

/// A video whose relation-bearing captions sit exactly on the uniform
/// initial sample, with filler captions everywhere else.
pub struct ChainCase {
    pub bundle: VideoBundle,
    pub item: QAItem,
    /// Relation lines that must both be in the prompt.
    pub evidence: [String; 2],
}

const CHAIN_ACTORS: [(&str, &str, &str); 10] = [
    ("person", "toy", "dog"),
    ("boy", "ball", "dog"),
    ("girl", "book", "cat"),
    ("man", "hat", "dog"),
    ("woman", "cup", "cat"),
    ("child", "sword", "dog"),
    ("person", "box", "cat"),
    ("boy", "bottle", "dog"),
    ("girl", "phone", "dog"),
    ("man", "bag", "cat"),
];

pub const CHAIN_TOTAL_FRAMES: u32 = 60;
pub const CHAIN_FALLBACK: &str = "answer: A\nconfidence: 1\nmissing: why the animal reacted";

/// Ten causal-chain questions: "X takes the Y, then the Z barks (or
/// bites) X". The correct option is never A, the scripted fallback.
pub fn chain_suite() -> (Vec<ChainCase>, Script) {
    let mut cases = Vec::new();
    let mut entries = Vec::new();
    for (i, (actor, object, animal)) in CHAIN_ACTORS.iter().enumerate() {
        let video_id = format!("chain{i:02}");
        let mut bundle = VideoBundle::new(&video_id, CHAIN_TOTAL_FRAMES);
        let reaction = if *animal == "dog" { "barks at" } else { "bites" };
        let reaction_lemma = if *animal == "dog" { "bark" } else { "bite" };
        for f in 0..CHAIN_TOTAL_FRAMES {
            let caption = match f {
                6 => format!("the {actor} holds the {object}"),
                18 => format!("the {actor} takes the {object}"),
                30 => format!("the {animal} {reaction} the {actor}"),
                42 => format!("the {animal} becomes angry"),
                54 => format!("the {actor} walks in the park"),
                f if f % 2 == 0 => "a tree stands in the park".to_string(),
                _ => "the sky is blue".to_string(),
            };
            bundle.captions.insert(f, caption);
        }
        let answer = 1 + i % 4;
        let mut options: Vec<String> = vec![
            format!("the {animal} was hungry"),
            format!("the {animal} was playing"),
            format!("the {actor} stepped on it"),
            format!("it heard a noise"),
            format!("it saw another {animal}"),
        ];
        options[answer] = format!("the {actor} took the {object}");
        let item = QAItem {
            id: Some(format!("chain-{i}")),
            video_id: video_id.clone(),
            question: format!("Why did the {animal} react to the {actor}?"),
            options,
            answer_index: Some(answer),
            category: Some(vidgraph_core::store::QuestionCategory::Causal),
            entity_count_bucket: None,
        };
        let evidence = [
            format!("{actor} —take→ {object}"),
            format!("{animal} —{reaction_lemma}→ {actor}"),
        ];
        let letter = char::from(b'A' + answer as u8);
        entries.push(entry(
            None,
            &[evidence[0].as_str(), evidence[1].as_str()],
            &format!("reasoning: the {animal} reacted after the {actor} took the {object}\nanswer: {letter}\nconfidence: 3\nmissing: none"),
        ));
        cases.push(ChainCase { bundle, item, evidence });
    }
    entries.push(entry(None, &[], CHAIN_FALLBACK));
    (cases, Script::new(entries).expect("suite script"))
}
