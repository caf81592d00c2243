//! HTTP routes of the executor node.
//!
//! Control messages are POSTed as canonical JSON; replies are protocol
//! messages or `{"ok":true}`. Per-delegation events are served as an SSE
//! stream that replays from `Last-Event-ID` and ends once the assignment
//! reaches a terminal state and the buffer is drained.

use crate::events::Channel;
use crate::executor::ExecutorService;
use awcp_core::{decode_message, encode_message, ErrorCode, Message, Payload, ProtocolError};
use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use std::net::SocketAddr;
use std::sync::Arc;
use tokio::task::JoinHandle;

fn message_response(status: u16, msg: &Message) -> Response {
    Response::builder()
        .status(status)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(encode_message(msg)))
        .expect("static response parts")
}

fn plain_error(status: u16, delegation_id: &str, err: ProtocolError) -> Response {
    message_response(status, &Message::new(delegation_id, Payload::Error(err)))
}

/// Best-effort extraction for error replies to bodies that failed to decode.
fn sniff_delegation_id(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.get("delegationId").and_then(|d| d.as_str()).map(String::from))
        .unwrap_or_else(|| "unknown".to_string())
}

fn authorized(service: &ExecutorService, headers: &HeaderMap) -> bool {
    match service.auth_token() {
        None => true,
        Some(token) => headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(|presented| presented == token)
            .unwrap_or(false),
    }
}

async fn invite_route(
    State(service): State<Arc<ExecutorService>>,
    headers: HeaderMap,
    body: String,
) -> Response {
    if !authorized(&service, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let msg = match decode_message(&body) {
        Ok(m) => m,
        Err(e) => return plain_error(400, &sniff_delegation_id(&body), e.to_protocol_error()),
    };
    let (status, reply) = service.handle_invite(&msg).await;
    message_response(status, &reply)
}

async fn start_route(
    State(service): State<Arc<ExecutorService>>,
    headers: HeaderMap,
    body: String,
) -> Response {
    if !authorized(&service, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let msg = match decode_message(&body) {
        Ok(m) => m,
        Err(e) => return plain_error(400, &sniff_delegation_id(&body), e.to_protocol_error()),
    };
    match service.handle_start(&msg).await {
        Ok(()) => Response::builder()
            .status(200)
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from("{\"ok\":true}"))
            .expect("static response parts"),
        Err((status, reply)) => message_response(status, &reply),
    }
}

async fn ack_route(
    State(service): State<Arc<ExecutorService>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    if !authorized(&service, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    match service.handle_ack(&id).await {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err((status, reply)) => message_response(status, &reply),
    }
}

async fn error_route(
    State(service): State<Arc<ExecutorService>>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: String,
) -> Response {
    if !authorized(&service, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let msg = match decode_message(&body) {
        Ok(m) => m,
        Err(e) => return plain_error(400, &id, e.to_protocol_error()),
    };
    let Payload::Error(err) = &msg.payload else {
        let e = ProtocolError::new(
            ErrorCode::MalformedMessage,
            format!("expected ERROR, got {}", msg.message_type()),
        );
        return plain_error(400, &id, e);
    };
    if msg.delegation_id != id {
        let e = ProtocolError::new(
            ErrorCode::MalformedMessage,
            "path delegation id and body delegationId disagree",
        );
        return plain_error(400, &id, e);
    }
    match service.handle_error_push(&id, err).await {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err((status, reply)) => message_response(status, &reply),
    }
}

fn parse_last_event_id(headers: &HeaderMap) -> u64 {
    headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

fn sse_body(channel: Arc<Channel>, cursor: u64) -> Body {
    let stream = futures::stream::unfold((channel, cursor), |(channel, cursor)| async move {
        match channel.next_after(cursor).await {
            Some(events) => {
                let last = events.last().expect("non-empty batch").id;
                let chunk: String = events.iter().map(|e| e.encode()).collect();
                Some((
                    Ok::<_, std::convert::Infallible>(bytes::Bytes::from(chunk)),
                    (channel, last),
                ))
            }
            None => None,
        }
    });
    Body::from_stream(stream)
}

async fn events_route(
    State(service): State<Arc<ExecutorService>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    if !authorized(&service, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let Some(channel) = service.channel(&id) else {
        let err = ProtocolError::new(
            ErrorCode::UnknownDelegation,
            format!("no event stream for delegation {id}"),
        );
        return plain_error(404, &id, err);
    };
    let cursor = parse_last_event_id(&headers);
    Response::builder()
        .status(200)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(sse_body(channel, cursor))
        .expect("static response parts")
}

async fn snapshot_route(
    State(service): State<Arc<ExecutorService>>,
    headers: HeaderMap,
    Path((id, sid)): Path<(String, String)>,
) -> Response {
    if !authorized(&service, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    match service.snapshot_payload(&id, &sid) {
        Some(json) => Response::builder()
            .status(200)
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(json))
            .expect("static response parts"),
        None => {
            let err = ProtocolError::new(
                ErrorCode::InvalidState,
                format!("no stored snapshot {sid} for delegation {id}"),
            );
            plain_error(404, &id, err)
        }
    }
}

pub fn executor_router(service: Arc<ExecutorService>) -> Router {
    Router::new()
        .route("/awcp/v1/invite", post(invite_route))
        .route("/awcp/v1/start", post(start_route))
        .route("/awcp/v1/delegations/{id}/ack", post(ack_route))
        .route("/awcp/v1/delegations/{id}/error", post(error_route))
        .route("/awcp/v1/delegations/{id}/snapshots/{sid}", get(snapshot_route))
        .route("/tasks/{id}/events", get(events_route))
        .with_state(service)
}

/// Bind and serve the executor. Returns the bound address and the server
/// task; abort the task to stop listening.
pub async fn serve_executor(
    service: Arc<ExecutorService>,
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    let router = executor_router(service);
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            tracing::error!(error = %e, "executor server stopped");
        }
    });
    Ok((bound, handle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, CommandBackend};
    use crate::client::{StartReply, WireClient};
    use crate::executor::{ExecutorConfig, ExecutorService};
    use awcp_core::{
        ActiveLease, EnvironmentDeclaration, InvitePayload, LeaseConfig, LeaseMode, StartPayload,
        TaskSpec, TransportKind,
    };
    use awcp_transport::{
        delegator_transport, DelegatorTransportConfig, PatternSet, WorkspaceManifest,
    };
    use chrono::Utc;
    use futures::StreamExt;
    use std::time::Duration;

    fn shell(script: &str) -> Arc<dyn Backend> {
        Arc::new(CommandBackend::new("/bin/sh").with_args(vec!["-c".into(), script.into()]))
    }

    async fn spawn_service(
        base: &std::path::Path,
        backend: Arc<dyn Backend>,
        auth: Option<&str>,
    ) -> (Arc<ExecutorService>, String) {
        let mut config = ExecutorConfig::new(base, backend);
        config.ack_timeout = Duration::from_millis(300);
        config.auth_token = auth.map(String::from);
        let service = ExecutorService::new(config);
        let (addr, _) = serve_executor(service.clone(), "127.0.0.1:0".parse().unwrap())
            .await
            .unwrap();
        (service, format!("http://{addr}"))
    }

    fn invite(id: &str, mode: LeaseMode) -> Message {
        Message::new(
            id,
            Payload::Invite(InvitePayload {
                task: TaskSpec { description: "demo".into(), agent_prompt: "p".into() },
                lease: LeaseConfig { ttl_seconds: 120, mode },
                environment: EnvironmentDeclaration::everything(),
                transport_kind: TransportKind::Archive,
            }),
        )
    }

    async fn archive_start(id: &str, workspace: &std::path::Path, mode: LeaseMode) -> Message {
        let manifest =
            WorkspaceManifest::capture(workspace, &PatternSet::everything(), false).unwrap();
        let mut packer = delegator_transport(
            TransportKind::Archive,
            id,
            &DelegatorTransportConfig::default(),
        )
        .unwrap();
        let handle = packer.package(workspace, &manifest).await.unwrap();
        Message::new(
            id,
            Payload::Start(StartPayload {
                lease: ActiveLease {
                    expires_at: Utc::now() + chrono::Duration::seconds(120),
                    mode,
                },
                transport: handle,
            }),
        )
    }

    #[tokio::test]
    async fn full_lifecycle_over_http_with_exact_sse_framing() {
        let workspace = tempfile::tempdir().unwrap();
        std::fs::write(workspace.path().join("note.txt"), "hello\n").unwrap();
        let base = tempfile::tempdir().unwrap();
        let (_service, url) = spawn_service(
            base.path(),
            shell("echo AWCP_SUMMARY: rewrote the note && echo done > note.txt"),
            None,
        )
        .await;
        let client = WireClient::new(None);

        let reply = client.post_invite(&url, &invite("d-http", LeaseMode::ReadWrite)).await.unwrap();
        assert!(matches!(reply.payload, Payload::Accept(_)));

        let start = archive_start("d-http", workspace.path(), LeaseMode::ReadWrite).await;
        assert_eq!(client.post_start(&url, &start).await.unwrap(), StartReply::Accepted);

        // Wait for the terminal event through the subscription API.
        let mut stream = client.subscribe(&url, "d-http", 0);
        let mut names = Vec::new();
        while let Some(frame) = stream.next().await {
            let frame = frame.unwrap();
            names.push(frame.event.clone());
            if frame.event == "done" || frame.event == "error" {
                break;
            }
        }
        assert_eq!(names.first().map(String::as_str), Some("status"));
        assert_eq!(names.last().map(String::as_str), Some("done"));

        // Raw body: ids start at 1 and increase by one, and the first frame
        // is byte-exact.
        let raw = reqwest::get(format!("{url}/tasks/d-http/events"))
            .await
            .unwrap()
            .text()
            .await
            .unwrap();
        assert!(raw.starts_with("id: 1\nevent: status\ndata: {\"state\":\"running\"}\n\n"));
        let blocks: Vec<&str> = raw.split("\n\n").filter(|b| !b.is_empty()).collect();
        for (i, block) in blocks.iter().enumerate() {
            let mut lines = block.lines();
            assert_eq!(lines.next().unwrap(), format!("id: {}", i + 1));
            assert!(lines.next().unwrap().starts_with("event: "));
            assert!(lines.next().unwrap().starts_with("data: "));
        }

        client.post_ack(&url, "d-http").await.unwrap();
    }

    #[tokio::test]
    async fn undecodable_bodies_are_reported_as_malformed() {
        let base = tempfile::tempdir().unwrap();
        let (_service, url) = spawn_service(base.path(), shell("true"), None).await;
        let response = reqwest::Client::new()
            .post(format!("{url}/awcp/v1/invite"))
            .body("{not json")
            .send()
            .await
            .unwrap();
        assert_eq!(response.status().as_u16(), 400);
        let body = response.text().await.unwrap();
        assert!(body.contains("MALFORMED_MESSAGE"), "body was {body}");

        // Well-formed JSON that is not a protocol message gets the same
        // treatment.
        let response = reqwest::Client::new()
            .post(format!("{url}/awcp/v1/start"))
            .body(r#"{"delegationId":"d-x","type":"NOPE","protocolVersion":"1.0"}"#)
            .send()
            .await
            .unwrap();
        assert_eq!(response.status().as_u16(), 400);
        assert!(response.text().await.unwrap().contains("MALFORMED_MESSAGE"));
    }

    #[tokio::test]
    async fn bearer_auth_guards_every_route() {
        let base = tempfile::tempdir().unwrap();
        let (_service, url) = spawn_service(base.path(), shell("true"), Some("sesame")).await;

        let bare = reqwest::Client::new();
        for (method, path) in [
            ("POST", "/awcp/v1/invite"),
            ("POST", "/awcp/v1/start"),
            ("POST", "/awcp/v1/delegations/d-1/ack"),
            ("POST", "/awcp/v1/delegations/d-1/error"),
            ("GET", "/tasks/d-1/events"),
            ("GET", "/awcp/v1/delegations/d-1/snapshots/s1"),
        ] {
            let req = match method {
                "POST" => bare.post(format!("{url}{path}")),
                _ => bare.get(format!("{url}{path}")),
            };
            assert_eq!(req.send().await.unwrap().status().as_u16(), 401, "{method} {path}");
            let req = match method {
                "POST" => bare.post(format!("{url}{path}")).bearer_auth("wrong"),
                _ => bare.get(format!("{url}{path}")).bearer_auth("wrong"),
            };
            assert_eq!(req.send().await.unwrap().status().as_u16(), 401, "{method} {path}");
        }

        let client = WireClient::new(Some("sesame".into()));
        let reply = client.post_invite(&url, &invite("d-auth", LeaseMode::ReadOnly)).await.unwrap();
        assert!(matches!(reply.payload, Payload::Accept(_)));
    }

    #[tokio::test]
    async fn event_stream_for_unknown_delegations_is_a_404() {
        let base = tempfile::tempdir().unwrap();
        let (_service, url) = spawn_service(base.path(), shell("true"), None).await;
        let response = reqwest::get(format!("{url}/tasks/nope/events")).await.unwrap();
        assert_eq!(response.status().as_u16(), 404);
        assert!(response.text().await.unwrap().contains("UNKNOWN_DELEGATION"));
    }

    #[tokio::test]
    async fn oversized_snapshots_travel_by_reference() {
        let workspace = tempfile::tempdir().unwrap();
        // Random-ish bytes so the ZIP stays past the inline limit.
        let mut blob = vec![0u8; 1_400_000];
        let mut x: u32 = 0x9e3779b9;
        for b in blob.iter_mut() {
            x = x.wrapping_mul(1664525).wrapping_add(1013904223);
            *b = (x >> 24) as u8;
        }
        std::fs::write(workspace.path().join("blob.bin"), &blob).unwrap();
        let base = tempfile::tempdir().unwrap();
        let (_service, url) =
            spawn_service(base.path(), shell("echo AWCP_SUMMARY: kept the blob"), None).await;
        let client = WireClient::new(None);

        client.post_invite(&url, &invite("d-big", LeaseMode::ReadWrite)).await.unwrap();
        let start = archive_start("d-big", workspace.path(), LeaseMode::ReadWrite).await;
        assert_eq!(client.post_start(&url, &start).await.unwrap(), StartReply::Accepted);

        let mut stream = client.subscribe(&url, "d-big", 0);
        let mut reference: Option<String> = None;
        while let Some(frame) = stream.next().await {
            let frame = frame.unwrap();
            if frame.event == "snapshot" {
                let v: serde_json::Value = serde_json::from_str(&frame.data).unwrap();
                assert_eq!(v.get("byReference").and_then(|b| b.as_bool()), Some(true));
                reference = v
                    .get("snapshotId")
                    .and_then(|s| s.as_str())
                    .map(String::from);
            }
            if frame.event == "done" || frame.event == "error" {
                break;
            }
        }
        let sid = reference.expect("snapshot event observed");
        let full = client.fetch_snapshot(&url, "d-big", &sid).await.unwrap();
        let v: serde_json::Value = serde_json::from_str(&full).unwrap();
        assert_eq!(v.get("snapshotId").and_then(|s| s.as_str()), Some(sid.as_str()));
        assert!(v.get("data").is_some(), "full descriptor carries the payload");
        client.post_ack(&url, "d-big").await.unwrap();
    }
}
