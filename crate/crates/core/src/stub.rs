//! A deterministic local endpoint speaking the OpenAI-compatible chat and
//! embedding wire format, for offline pipeline runs and tests.
//!
//! Chat responses are selected by substring rules against the last user
//! message, optionally per model, so a run against the stub is a pure
//! function of its configuration. Embeddings are derived from a hash of the
//! input text. A failure budget can be set to exercise retry handling.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use serde::Deserialize;
use sha2::{Digest, Sha256};

/// Picks a canned response when the last user message contains `contains`
/// and the requested model matches (any model when `None`).
#[derive(Debug, Clone)]
pub struct StubRule {
    pub contains: String,
    pub model: Option<String>,
    pub response: String,
}

/// Behavior of a stub server instance.
#[derive(Debug, Clone)]
pub struct StubBehavior {
    pub rules: Vec<StubRule>,
    pub default_response: String,
    /// Respond 500 to this many chat requests before serving normally.
    pub fail_first: u64,
    pub embedding_dim: usize,
}

impl Default for StubBehavior {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default_response: String::new(),
            fail_first: 0,
            embedding_dim: 16,
        }
    }
}

/// Handle to a running stub server; shuts down on drop.
pub struct StubServer {
    addr: SocketAddr,
    chat_requests: Arc<AtomicU64>,
    shutdown: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn spawn(behavior: StubBehavior) -> std::io::Result<StubServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let chat_requests = Arc::new(AtomicU64::new(0));
        let failures_left = Arc::new(AtomicU64::new(behavior.fail_first));

        let accept_shutdown = Arc::clone(&shutdown);
        let accept_requests = Arc::clone(&chat_requests);
        let handle = std::thread::spawn(move || {
            let behavior = Arc::new(behavior);
            for stream in listener.incoming() {
                if accept_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let behavior = Arc::clone(&behavior);
                let requests = Arc::clone(&accept_requests);
                let failures = Arc::clone(&failures_left);
                std::thread::spawn(move || {
                    let _ = handle_connection(stream, &behavior, &requests, &failures);
                });
            }
        });

        Ok(StubServer {
            addr,
            chat_requests,
            shutdown,
            handle: Some(handle),
        })
    }

    /// Base URL including the `/v1` prefix.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Number of chat requests that reached the server (cache hits do not).
    pub fn chat_request_count(&self) -> u64 {
        self.chat_requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

#[derive(Deserialize)]
struct IncomingChat {
    #[serde(default)]
    model: String,
    #[serde(default)]
    messages: Vec<IncomingMessage>,
}

#[derive(Deserialize)]
struct IncomingMessage {
    #[serde(default)]
    role: String,
    #[serde(default)]
    content: String,
}

#[derive(Deserialize)]
struct IncomingEmbedding {
    #[serde(default)]
    input: Vec<String>,
}

fn handle_connection(
    mut stream: TcpStream,
    behavior: &StubBehavior,
    chat_requests: &AtomicU64,
    failures_left: &AtomicU64,
) -> std::io::Result<()> {
    let (path, body) = read_request(&mut stream)?;

    let (status, payload) = if path.ends_with("/chat/completions") {
        chat_requests.fetch_add(1, Ordering::SeqCst);
        let should_fail = failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if should_fail {
            ("500 Internal Server Error", r#"{"error":"injected failure"}"#.to_string())
        } else {
            match serde_json::from_slice::<IncomingChat>(&body) {
                Ok(request) => {
                    let content = respond_chat(behavior, &request);
                    let doc = serde_json::json!({
                        "object": "chat.completion",
                        "model": request.model,
                        "choices": [{
                            "index": 0,
                            "message": {"role": "assistant", "content": content},
                            "finish_reason": "stop",
                        }],
                    });
                    ("200 OK", doc.to_string())
                }
                Err(e) => ("400 Bad Request", format!(r#"{{"error":"{e}"}}"#)),
            }
        }
    } else if path.ends_with("/embeddings") {
        match serde_json::from_slice::<IncomingEmbedding>(&body) {
            Ok(request) => {
                let data: Vec<serde_json::Value> = request
                    .input
                    .iter()
                    .enumerate()
                    .map(|(index, text)| {
                        serde_json::json!({
                            "index": index,
                            "embedding": hash_embedding(text, behavior.embedding_dim),
                        })
                    })
                    .collect();
                ("200 OK", serde_json::json!({ "data": data }).to_string())
            }
            Err(e) => ("400 Bad Request", format!(r#"{{"error":"{e}"}}"#)),
        }
    } else {
        ("404 Not Found", r#"{"error":"unknown path"}"#.to_string())
    };

    let response = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len(),
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}

fn respond_chat(behavior: &StubBehavior, request: &IncomingChat) -> String {
    let last_user = request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == "user")
        .map(|m| m.content.as_str())
        .unwrap_or("");
    for rule in &behavior.rules {
        let model_matches = rule.model.as_deref().is_none_or(|m| m == request.model);
        if model_matches && last_user.contains(&rule.contains) {
            return rule.response.clone();
        }
    }
    behavior.default_response.clone()
}

/// Deterministic non-zero vector from the text's SHA-256 bytes.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut values = Vec::with_capacity(dim);
    let mut counter: u32 = 0;
    while values.len() < dim {
        let mut hasher = Sha256::new();
        hasher.update(counter.to_le_bytes());
        hasher.update(text.as_bytes());
        for byte in hasher.finalize() {
            if values.len() >= dim {
                break;
            }
            // Bytes are integers, so the value never hits exactly zero.
            values.push((byte as f64 - 127.5) / 127.5);
        }
        counter += 1;
    }
    values
}

fn read_request(stream: &mut TcpStream) -> std::io::Result<(String, Vec<u8>)> {
    let mut buffer = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        if let Some(pos) = find_header_end(&buffer) {
            break pos;
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "connection closed before headers",
            ));
        }
        buffer.extend_from_slice(&chunk[..n]);
    };

    let header_text = String::from_utf8_lossy(&buffer[..header_end]).to_string();
    let path = header_text
        .lines()
        .next()
        .and_then(|line| line.split_whitespace().nth(1))
        .unwrap_or("/")
        .to_string();
    let content_length = header_text
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            if name.trim().eq_ignore_ascii_case("content-length") {
                value.trim().parse::<usize>().ok()
            } else {
                None
            }
        })
        .unwrap_or(0);

    let mut body = buffer[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        body.extend_from_slice(&chunk[..n]);
    }
    body.truncate(content_length);
    Ok((path, body))
}

fn find_header_end(buffer: &[u8]) -> Option<usize> {
    buffer.windows(4).position(|w| w == b"\r\n\r\n")
}
