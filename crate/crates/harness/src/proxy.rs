//! TCP proxies that sit between a delegator's HTTP client and an executor's
//! listener and misbehave on purpose: dropping requests, corrupting payload
//! bytes, stalling or tearing event streams, and cutting connections after a
//! byte budget. Every forwarded request gets `Connection: close` so each
//! request crosses a fresh connection and no fault is skipped by keep-alive
//! reuse.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

/// Which transport-level faults this proxy injects. Default is a faithful
/// relay.
#[derive(Debug, Clone, Default)]
pub struct ProxyFaults {
    /// Close START connections without forwarding anything, so the sender
    /// sees the channel die mid-request.
    pub drop_start: bool,
    /// Flip one base64 character inside a START body's inline archive.
    pub corrupt_start_byte: bool,
    /// Hold the first event-stream response back this long before relaying.
    pub delay_events_ms: Option<u64>,
    /// Tear the first event stream right before its `done` frame, then strip
    /// `Last-Event-ID` from the reconnect so the server replays every frame
    /// it ever sent. The subscriber must still deliver `done` exactly once.
    pub duplicate_done: bool,
    /// Close each event-stream response after relaying a number of bytes
    /// drawn from this inclusive range, forcing repeated reconnects.
    pub chop_event_bytes: Option<(u64, u64)>,
}

impl ProxyFaults {
    pub fn is_active(&self) -> bool {
        self.drop_start
            || self.corrupt_start_byte
            || self.delay_events_ms.is_some()
            || self.duplicate_done
            || self.chop_event_bytes.is_some()
    }
}

struct ProxyState {
    upstream: SocketAddr,
    faults: ProxyFaults,
    rng: Mutex<ChaCha8Rng>,
    /// duplicate_done: flips once the first stream has been torn; reconnects
    /// after that point lose their Last-Event-ID header.
    done_torn: AtomicBool,
    /// delay_events_ms: consumed by the first event-stream connection.
    delay_used: AtomicBool,
    event_connections: Arc<AtomicU32>,
}

/// A listening fault injector. Dropping it stops the listener.
pub struct FaultProxy {
    addr: SocketAddr,
    event_connections: Arc<AtomicU32>,
    accept_task: JoinHandle<()>,
}

impl FaultProxy {
    pub async fn spawn(
        upstream: SocketAddr,
        faults: ProxyFaults,
        seed: u64,
    ) -> std::io::Result<FaultProxy> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let event_connections = Arc::new(AtomicU32::new(0));
        let state = Arc::new(ProxyState {
            upstream,
            faults,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            done_torn: AtomicBool::new(false),
            delay_used: AtomicBool::new(false),
            event_connections: event_connections.clone(),
        });
        let accept_task = tokio::spawn(async move {
            loop {
                let Ok((socket, _)) = listener.accept().await else { return };
                let state = state.clone();
                tokio::spawn(async move {
                    handle_connection(state, socket).await;
                });
            }
        });
        Ok(FaultProxy { addr, event_connections, accept_task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// How many event-stream connections have been accepted so far.
    pub fn event_connections(&self) -> u32 {
        self.event_connections.load(Ordering::SeqCst)
    }
}

impl Drop for FaultProxy {
    fn drop(&mut self) {
        self.accept_task.abort();
    }
}

struct ProxiedRequest {
    line: String,
    path: String,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

impl ProxiedRequest {
    /// Re-serialize with keep-alive disabled so the upstream closes the
    /// connection after one exchange and the relay sees a clean EOF.
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.line.as_bytes());
        out.extend_from_slice(b"\r\n");
        for (name, value) in &self.headers {
            if name.eq_ignore_ascii_case("connection") {
                continue;
            }
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(b": ");
            out.extend_from_slice(value.as_bytes());
            out.extend_from_slice(b"\r\n");
        }
        out.extend_from_slice(b"Connection: close\r\n\r\n");
        out.extend_from_slice(&self.body);
        out
    }
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

async fn read_request(client: &mut TcpStream) -> Option<ProxiedRequest> {
    let mut buf = Vec::new();
    let head_end = loop {
        if let Some(pos) = find(&buf, b"\r\n\r\n") {
            break pos;
        }
        if buf.len() > (1 << 20) {
            return None;
        }
        let mut chunk = [0u8; 4096];
        let n = client.read(&mut chunk).await.ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
    };
    let head = std::str::from_utf8(&buf[..head_end]).ok()?;
    let mut lines = head.split("\r\n");
    let line = lines.next()?.to_string();
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut headers = Vec::new();
    let mut content_length = 0usize;
    for raw in lines {
        let (name, value) = raw.split_once(':')?;
        let name = name.trim().to_string();
        let value = value.trim().to_string();
        if name.eq_ignore_ascii_case("content-length") {
            content_length = value.parse().ok()?;
        }
        headers.push((name, value));
    }
    let mut body = buf[head_end + 4..].to_vec();
    while body.len() < content_length {
        let mut chunk = [0u8; 4096];
        let n = client.read(&mut chunk).await.ok()?;
        if n == 0 {
            return None;
        }
        body.extend_from_slice(&chunk[..n]);
    }
    Some(ProxiedRequest { line, path, headers, body })
}

/// Flip one character inside the request's `dataBase64` string. The final
/// quantum's padding bits can decode identically after a flip, so the last
/// four characters are off limits. Length is unchanged, keeping the declared
/// Content-Length honest.
fn corrupt_archive_payload(body: &mut [u8], rng: &mut ChaCha8Rng) -> bool {
    let needle = b"\"dataBase64\":\"";
    let Some(at) = find(body, needle) else { return false };
    let start = at + needle.len();
    let Some(len) = body[start..].iter().position(|&b| b == b'"') else {
        return false;
    };
    if len <= 4 {
        return false;
    }
    let pos = start + rng.random_range(0..len - 4);
    body[pos] = if body[pos] == b'A' { b'B' } else { b'A' };
    true
}

async fn handle_connection(state: Arc<ProxyState>, mut client: TcpStream) {
    let Some(mut req) = read_request(&mut client).await else { return };
    let is_events = req.path.contains("/events");
    let is_start = req.path.starts_with("/awcp/v1/start");
    if is_events {
        state.event_connections.fetch_add(1, Ordering::SeqCst);
    }

    if state.faults.drop_start && is_start {
        return;
    }
    if state.faults.corrupt_start_byte && is_start {
        let mut rng = state.rng.lock().unwrap();
        corrupt_archive_payload(&mut req.body, &mut rng);
    }
    if state.faults.duplicate_done && is_events && state.done_torn.load(Ordering::SeqCst) {
        req.headers.retain(|(name, _)| !name.eq_ignore_ascii_case("last-event-id"));
    }

    let Ok(mut upstream) = TcpStream::connect(state.upstream).await else {
        return;
    };
    if upstream.write_all(&req.to_bytes()).await.is_err() {
        return;
    }

    if is_events {
        if let Some(ms) = state.faults.delay_events_ms {
            if !state.delay_used.swap(true, Ordering::SeqCst) {
                tokio::time::sleep(Duration::from_millis(ms)).await;
            }
        }
    }

    let budget = match (state.faults.chop_event_bytes, is_events) {
        (Some((lo, hi)), true) => {
            let mut rng = state.rng.lock().unwrap();
            Some(rng.random_range(lo..=hi))
        }
        _ => None,
    };
    let tear_done =
        state.faults.duplicate_done && is_events && !state.done_torn.load(Ordering::SeqCst);

    relay_response(&state, &mut upstream, &mut client, tear_done, budget).await;
}

const DONE_FRAME: &[u8] = b"event: done";

/// Stream the upstream response back, optionally tearing the connection at
/// the first `done` frame or after a byte budget. The done scan holds back a
/// pattern-length tail between reads so a frame split across chunks is still
/// caught.
async fn relay_response(
    state: &ProxyState,
    upstream: &mut TcpStream,
    client: &mut TcpStream,
    tear_done: bool,
    mut budget: Option<u64>,
) {
    let mut pending: Vec<u8> = Vec::new();
    let mut chunk = [0u8; 8192];
    loop {
        let n = match upstream.read(&mut chunk).await {
            Ok(0) | Err(_) => {
                if !pending.is_empty() {
                    let _ = client.write_all(&pending).await;
                }
                return;
            }
            Ok(n) => n,
        };
        pending.extend_from_slice(&chunk[..n]);
        if tear_done {
            if let Some(pos) = find(&pending, DONE_FRAME) {
                let _ = client.write_all(&pending[..pos]).await;
                state.done_torn.store(true, Ordering::SeqCst);
                return;
            }
            let flush = pending.len().saturating_sub(DONE_FRAME.len() - 1);
            if flush > 0 {
                if client.write_all(&pending[..flush]).await.is_err() {
                    return;
                }
                pending.drain(..flush);
            }
        } else if let Some(left) = budget.as_mut() {
            let take = (*left).min(pending.len() as u64) as usize;
            if client.write_all(&pending[..take]).await.is_err() {
                return;
            }
            pending.drain(..take);
            *left -= take as u64;
            if *left == 0 {
                return;
            }
        } else {
            if client.write_all(&pending).await.is_err() {
                return;
            }
            pending.clear();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupts_only_inside_the_base64_span() {
        let original = br#"{"transport":{"dataBase64":"aGVsbG8gd29ybGQhIQ=="},"x":1}"#;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut body = original.to_vec();
            assert!(corrupt_archive_payload(&mut body, &mut rng));
            let diff: Vec<usize> =
                (0..body.len()).filter(|&i| body[i] != original[i]).collect();
            assert_eq!(diff.len(), 1);
            let span_start = find(original, b"\"dataBase64\":\"").unwrap() + 14;
            let span_end = span_start
                + original[span_start..].iter().position(|&b| b == b'"').unwrap();
            assert!(diff[0] >= span_start);
            // The last four characters carry padding bits and stay intact.
            assert!(diff[0] < span_end - 4);
            assert_eq!(body.len(), original.len());
        }
    }

    #[test]
    fn leaves_bodies_without_archives_alone() {
        let mut body = br#"{"type":"START","lease":{"ttlSeconds":60}}"#.to_vec();
        let snapshot = body.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(!corrupt_archive_payload(&mut body, &mut rng));
        assert_eq!(body, snapshot);
    }

    #[tokio::test]
    async fn relays_a_plain_exchange_untouched() {
        let upstream = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let upstream_addr = upstream.local_addr().unwrap();
        tokio::spawn(async move {
            let (mut sock, _) = upstream.accept().await.unwrap();
            let mut buf = vec![0u8; 4096];
            let n = sock.read(&mut buf).await.unwrap();
            let head = String::from_utf8_lossy(&buf[..n]).to_string();
            assert!(head.starts_with("POST /echo HTTP/1.1\r\n"));
            assert!(head.contains("Connection: close"));
            assert!(head.ends_with("ping"));
            sock.write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 4\r\nConnection: close\r\n\r\npong")
                .await
                .unwrap();
        });
        let proxy =
            FaultProxy::spawn(upstream_addr, ProxyFaults::default(), 0).await.unwrap();
        let mut sock = TcpStream::connect(proxy.addr()).await.unwrap();
        sock.write_all(b"POST /echo HTTP/1.1\r\nHost: x\r\nContent-Length: 4\r\n\r\nping")
            .await
            .unwrap();
        let mut reply = Vec::new();
        sock.read_to_end(&mut reply).await.unwrap();
        let reply = String::from_utf8(reply).unwrap();
        assert!(reply.starts_with("HTTP/1.1 200 OK"));
        assert!(reply.ends_with("pong"));
    }

    #[tokio::test]
    async fn drops_start_but_forwards_everything_else() {
        let upstream = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let upstream_addr = upstream.local_addr().unwrap();
        tokio::spawn(async move {
            loop {
                let Ok((mut sock, _)) = upstream.accept().await else { return };
                tokio::spawn(async move {
                    let mut buf = vec![0u8; 4096];
                    let _ = sock.read(&mut buf).await;
                    let _ = sock
                        .write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok")
                        .await;
                });
            }
        });
        let faults = ProxyFaults { drop_start: true, ..ProxyFaults::default() };
        let proxy = FaultProxy::spawn(upstream_addr, faults, 0).await.unwrap();

        let mut sock = TcpStream::connect(proxy.addr()).await.unwrap();
        sock.write_all(b"POST /awcp/v1/start HTTP/1.1\r\nHost: x\r\nContent-Length: 2\r\n\r\n{}")
            .await
            .unwrap();
        let mut reply = Vec::new();
        sock.read_to_end(&mut reply).await.unwrap();
        assert!(reply.is_empty());

        let mut sock = TcpStream::connect(proxy.addr()).await.unwrap();
        sock.write_all(b"POST /awcp/v1/invite HTTP/1.1\r\nHost: x\r\nContent-Length: 2\r\n\r\n{}")
            .await
            .unwrap();
        let mut reply = Vec::new();
        sock.read_to_end(&mut reply).await.unwrap();
        assert!(String::from_utf8(reply).unwrap().ends_with("ok"));
    }

    #[tokio::test]
    async fn tears_the_first_stream_before_done_and_strips_resume_cursor() {
        let upstream = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let upstream_addr = upstream.local_addr().unwrap();
        let seen_headers = Arc::new(Mutex::new(Vec::<String>::new()));
        let seen = seen_headers.clone();
        tokio::spawn(async move {
            loop {
                let Ok((mut sock, _)) = upstream.accept().await else { return };
                let seen = seen.clone();
                tokio::spawn(async move {
                    let mut buf = vec![0u8; 4096];
                    let n = sock.read(&mut buf).await.unwrap_or(0);
                    seen.lock().unwrap().push(String::from_utf8_lossy(&buf[..n]).to_string());
                    let body = "id: 1\nevent: status\ndata: {}\n\nid: 2\nevent: done\ndata: {}\n\n";
                    let head = format!(
                        "HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nContent-Length: {}\r\n\r\n",
                        body.len()
                    );
                    let _ = sock.write_all(head.as_bytes()).await;
                    let _ = sock.write_all(body.as_bytes()).await;
                });
            }
        });
        let faults = ProxyFaults { duplicate_done: true, ..ProxyFaults::default() };
        let proxy = FaultProxy::spawn(upstream_addr, faults, 0).await.unwrap();

        // First subscription dies before the done frame reaches the client.
        let mut sock = TcpStream::connect(proxy.addr()).await.unwrap();
        sock.write_all(b"GET /tasks/d1/events HTTP/1.1\r\nHost: x\r\nLast-Event-ID: 0\r\n\r\n")
            .await
            .unwrap();
        let mut reply = Vec::new();
        sock.read_to_end(&mut reply).await.unwrap();
        let text = String::from_utf8(reply).unwrap();
        assert!(text.contains("event: status"));
        assert!(!text.contains("event: done"));

        // The reconnect reaches the server without its resume cursor and the
        // full stream comes through.
        let mut sock = TcpStream::connect(proxy.addr()).await.unwrap();
        sock.write_all(b"GET /tasks/d1/events HTTP/1.1\r\nHost: x\r\nLast-Event-ID: 1\r\n\r\n")
            .await
            .unwrap();
        let mut reply = Vec::new();
        sock.read_to_end(&mut reply).await.unwrap();
        assert!(String::from_utf8(reply).unwrap().contains("event: done"));
        let headers = seen_headers.lock().unwrap();
        assert!(headers[0].contains("Last-Event-ID"));
        assert!(!headers[1].contains("Last-Event-ID"));
        assert_eq!(proxy.event_connections(), 2);
    }
}
