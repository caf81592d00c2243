//! HTTP client side of the wire: message posts with retry where the
//! protocol calls for it, and an event-stream subscription that reconnects
//! with `Last-Event-ID` and deduplicates replayed frames.

use crate::sse::{SseFrame, SseParser};
use awcp_core::{decode_message, encode_message, DecodeError, Message, Payload, ProtocolError};
use futures::stream::Stream;
use futures::StreamExt;
use std::collections::VecDeque;
use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("request to {url} failed: {source}")]
    Request {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("{url} returned {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("reply was not a valid protocol message: {0}")]
    Decode(#[from] DecodeError),
    #[error("event stream for {delegation_id} lost after {attempts} reconnect attempts")]
    StreamLost { delegation_id: String, attempts: u32 },
}

/// Outcome of posting START: the executor either takes the assignment or
/// refuses it with a protocol error.
#[derive(Debug, Clone, PartialEq)]
pub enum StartReply {
    Accepted,
    Refused(ProtocolError),
}

#[derive(Clone)]
pub struct WireClient {
    http: reqwest::Client,
    auth: Option<String>,
    retry_base: Duration,
    reconnect_base: Duration,
    reconnect_limit: u32,
}

const POST_TIMEOUT: Duration = Duration::from_secs(30);

impl WireClient {
    pub fn new(auth: Option<String>) -> Self {
        WireClient {
            http: reqwest::Client::new(),
            auth,
            retry_base: Duration::from_millis(100),
            reconnect_base: Duration::from_millis(200),
            reconnect_limit: 5,
        }
    }

    /// Shrink the retry and reconnect backoff bases. Intended for tests and
    /// fault drills that should not wait out production pacing.
    pub fn with_retry_pacing(mut self, retry_base: Duration, reconnect_base: Duration) -> Self {
        self.retry_base = retry_base;
        self.reconnect_base = reconnect_base;
        self
    }

    fn url(base: &str, path: &str) -> String {
        format!("{}{}", base.trim_end_matches('/'), path)
    }

    fn request(&self, builder: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.auth {
            Some(token) => builder.bearer_auth(token),
            None => builder,
        }
    }

    async fn post_message(&self, url: &str, msg: &Message) -> Result<(u16, String), WireError> {
        let response = self
            .request(self.http.post(url))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(encode_message(msg))
            .timeout(POST_TIMEOUT)
            .send()
            .await
            .map_err(|source| WireError::Request { url: url.to_string(), source })?;
        let status = response.status().as_u16();
        let body = response
            .text()
            .await
            .map_err(|source| WireError::Request { url: url.to_string(), source })?;
        Ok((status, body))
    }

    /// Send INVITE and return the executor's reply message, which is either
    /// ACCEPT or an ERROR envelope. Error envelopes ride on whatever HTTP
    /// status fits the failure, so the body is decoded before the status is
    /// judged.
    pub async fn post_invite(&self, endpoint: &str, msg: &Message) -> Result<Message, WireError> {
        let url = Self::url(endpoint, "/awcp/v1/invite");
        let (status, body) = self.post_message(&url, msg).await?;
        match decode_message(&body) {
            Ok(reply) => Ok(reply),
            Err(e) if (200..300).contains(&status) => Err(WireError::Decode(e)),
            Err(_) => Err(WireError::Status { url, status, body }),
        }
    }

    /// Send START. A `{"ok":true}` body means the executor took the
    /// assignment; an ERROR envelope is returned as a refusal.
    pub async fn post_start(&self, endpoint: &str, msg: &Message) -> Result<StartReply, WireError> {
        let url = Self::url(endpoint, "/awcp/v1/start");
        let (status, body) = self.post_message(&url, msg).await?;
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&body) {
            if value.get("ok").and_then(|v| v.as_bool()) == Some(true) {
                return Ok(StartReply::Accepted);
            }
        }
        if let Ok(Message { payload: Payload::Error(e), .. }) = decode_message(&body) {
            return Ok(StartReply::Refused(e));
        }
        Err(WireError::Status { url, status, body })
    }

    /// Acknowledge DONE. Retries twice on failure; a 404 means the executor
    /// has already finished cleanup, which is as good as an acknowledged
    /// receipt.
    pub async fn post_ack(&self, endpoint: &str, delegation_id: &str) -> Result<(), WireError> {
        let url = Self::url(endpoint, &format!("/awcp/v1/delegations/{delegation_id}/ack"));
        let mut last: Option<WireError> = None;
        for attempt in 0..3u32 {
            if attempt > 0 {
                tokio::time::sleep(self.retry_base * 2u32.pow(attempt - 1)).await;
            }
            match self.request(self.http.post(&url)).timeout(POST_TIMEOUT).send().await {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() || status.as_u16() == 404 {
                        return Ok(());
                    }
                    let body = response.text().await.unwrap_or_default();
                    last = Some(WireError::Status {
                        url: url.clone(),
                        status: status.as_u16(),
                        body,
                    });
                }
                Err(source) => last = Some(WireError::Request { url: url.clone(), source }),
            }
        }
        Err(last.expect("three attempts recorded an error"))
    }

    /// Push an ERROR envelope to the executor (cancellation, integrity
    /// failure). Like ACK, a 404 means the other side is already gone.
    pub async fn post_error(&self, endpoint: &str, msg: &Message) -> Result<(), WireError> {
        let url = Self::url(
            endpoint,
            &format!("/awcp/v1/delegations/{}/error", msg.delegation_id),
        );
        let (status, body) = self.post_message(&url, msg).await?;
        if (200..300).contains(&status) || status == 404 {
            Ok(())
        } else {
            Err(WireError::Status { url, status, body })
        }
    }

    /// Fetch a snapshot event that was published by reference because the
    /// inline form would have been oversized.
    pub async fn fetch_snapshot(
        &self,
        endpoint: &str,
        delegation_id: &str,
        snapshot_id: &str,
    ) -> Result<String, WireError> {
        let url = Self::url(
            endpoint,
            &format!("/awcp/v1/delegations/{delegation_id}/snapshots/{snapshot_id}"),
        );
        let response = self
            .request(self.http.get(&url))
            .timeout(POST_TIMEOUT)
            .send()
            .await
            .map_err(|source| WireError::Request { url: url.clone(), source })?;
        let status = response.status().as_u16();
        let body = response
            .text()
            .await
            .map_err(|source| WireError::Request { url: url.clone(), source })?;
        if (200..300).contains(&status) {
            Ok(body)
        } else {
            Err(WireError::Status { url, status, body })
        }
    }

    /// Subscribe to the executor's event stream for one delegation,
    /// starting after `last_event_id` (0 for the beginning). The stream
    /// reconnects on network failure, replays are deduplicated by event id,
    /// and after too many consecutive failed reconnects it yields one final
    /// error and ends.
    pub fn subscribe(
        &self,
        endpoint: &str,
        delegation_id: &str,
        last_event_id: u64,
    ) -> impl Stream<Item = Result<SseFrame, WireError>> + Send + Unpin {
        struct SubState {
            client: WireClient,
            url: String,
            delegation_id: String,
            cursor: u64,
            attempts: u32,
            finished: bool,
            conn: Option<(
                std::pin::Pin<
                    Box<dyn Stream<Item = Result<bytes::Bytes, reqwest::Error>> + Send>,
                >,
                SseParser,
            )>,
            queue: VecDeque<SseFrame>,
        }

        let state = SubState {
            client: self.clone(),
            url: Self::url(endpoint, &format!("/tasks/{delegation_id}/events")),
            delegation_id: delegation_id.to_string(),
            cursor: last_event_id,
            attempts: 0,
            finished: false,
            conn: None,
            queue: VecDeque::new(),
        };

        Box::pin(futures::stream::unfold(state, |mut st| async move {
            loop {
                if st.finished {
                    return None;
                }
                if let Some(frame) = st.queue.pop_front() {
                    // Replays arrive after every reconnect; only ids past
                    // the cursor are new.
                    if frame.id > st.cursor {
                        st.cursor = frame.id;
                        st.attempts = 0;
                        return Some((Ok(frame), st));
                    }
                    continue;
                }

                if st.conn.is_none() {
                    if st.attempts >= st.client.reconnect_limit {
                        st.finished = true;
                        let err = WireError::StreamLost {
                            delegation_id: st.delegation_id.clone(),
                            attempts: st.attempts,
                        };
                        return Some((Err(err), st));
                    }
                    if st.attempts > 0 {
                        let pause = st.client.reconnect_base * 2u32.pow(st.attempts - 1);
                        tokio::time::sleep(pause).await;
                    }
                    st.attempts += 1;
                    let mut builder = st
                        .client
                        .request(st.client.http.get(&st.url))
                        .header(reqwest::header::ACCEPT, "text/event-stream");
                    if st.cursor > 0 {
                        builder = builder.header("Last-Event-ID", st.cursor.to_string());
                    }
                    match builder.send().await {
                        Ok(response) if response.status().is_success() => {
                            st.conn =
                                Some((Box::pin(response.bytes_stream()), SseParser::new()));
                        }
                        Ok(_) | Err(_) => continue,
                    }
                }

                let (stream, parser) = st.conn.as_mut().expect("connection just ensured");
                match stream.next().await {
                    Some(Ok(chunk)) => {
                        let frames = parser.push(&chunk);
                        st.queue.extend(frames);
                    }
                    Some(Err(_)) | None => {
                        st.conn = None;
                    }
                }
            }
        }))
    }
}
