//! A small in-memory blob store speaking the pre-signed URL idiom, plus the
//! client the storage transport drives it with.
//!
//! The store is the kind of thing an object storage service provides in a
//! real deployment; it lives here so the storage transport is exercisable
//! on a single host with zero external services. The signing model is the
//! usual one: an admin credential mints grants, a grant is a random token
//! scoped to (path prefix, methods, expiry), and data URLs carry the token
//! plus its expiry as query parameters. Holders of a URL need no other
//! credential; expired or out-of-scope tokens get 403.

use crate::error::TransportError;
use axum::body::Bytes;
use axum::extract::{Path as AxumPath, Query, State};
use axum::http::{HeaderMap, Method, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{any, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

/// How a delegator reaches a blob store: env `AWCP_BLOB_STORE_URL` /
/// `AWCP_BLOB_STORE_ADMIN_TOKEN` in the CLI, explicit values in tests.
#[derive(Debug, Clone)]
pub struct BlobStoreConfig {
    pub base_url: String,
    pub admin_token: String,
}

#[derive(Debug, Clone)]
struct Grant {
    prefix: String,
    methods: Vec<String>,
    expires_at: DateTime<Utc>,
}

#[derive(Default)]
struct StoreState {
    blobs: Mutex<HashMap<String, Bytes>>,
    grants: Mutex<HashMap<String, Grant>>,
}

/// The embedded store. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct BlobStore {
    state: Arc<StoreState>,
    admin_token: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SignRequest {
    pub prefix: String,
    pub methods: Vec<String>,
    pub ttl_seconds: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SignedGrant {
    pub token: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeletePrefixRequest {
    pub prefix: String,
}

impl BlobStore {
    pub fn new(admin_token: impl Into<String>) -> Self {
        BlobStore { state: Arc::default(), admin_token: admin_token.into() }
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/blobs/{*path}", any(blob_handler))
            .route("/admin/sign", post(sign_handler))
            .route("/admin/delete-prefix", post(delete_prefix_handler))
            .with_state(self.clone())
    }

    /// Bind an ephemeral local port and serve until the handle is aborted.
    pub async fn serve(
        self,
    ) -> Result<(SocketAddr, tokio::task::JoinHandle<()>), TransportError> {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .map_err(TransportError::io("bind blob store"))?;
        let addr = listener.local_addr().map_err(TransportError::io("blob store addr"))?;
        let router = self.router();
        let handle = tokio::spawn(async move {
            let _ = axum::serve(listener, router).await;
        });
        Ok((addr, handle))
    }

    fn sign(&self, prefix: &str, methods: &[String], ttl: Duration) -> SignedGrant {
        let mut raw = [0u8; 16];
        rand::rng().fill_bytes(&mut raw);
        let token = hex::encode(raw);
        let expires_at = Utc::now() + ttl;
        self.state.grants.lock().unwrap().insert(
            token.clone(),
            Grant { prefix: prefix.to_string(), methods: methods.to_vec(), expires_at },
        );
        SignedGrant { token, expires_at }
    }

    /// Paths of every stored blob, sorted. Lets operators and resource
    /// audits see what is still parked without minting a grant.
    pub fn blob_paths(&self) -> Vec<String> {
        let mut paths: Vec<String> =
            self.state.blobs.lock().unwrap().keys().cloned().collect();
        paths.sort();
        paths
    }

    fn authorize(&self, token: &str, path: &str, method: &Method) -> Result<(), StatusCode> {
        let grants = self.state.grants.lock().unwrap();
        let grant = grants.get(token).ok_or(StatusCode::FORBIDDEN)?;
        if Utc::now() > grant.expires_at
            || !path.starts_with(&grant.prefix)
            || !grant.methods.iter().any(|m| m == method.as_str())
        {
            return Err(StatusCode::FORBIDDEN);
        }
        Ok(())
    }
}

async fn blob_handler(
    State(store): State<BlobStore>,
    AxumPath(path): AxumPath<String>,
    Query(params): Query<HashMap<String, String>>,
    method: Method,
    body: Bytes,
) -> axum::response::Response {
    let Some(token) = params.get("token") else {
        return StatusCode::FORBIDDEN.into_response();
    };
    if let Err(status) = store.authorize(token, &path, &method) {
        return status.into_response();
    }
    match method {
        Method::PUT => {
            store.state.blobs.lock().unwrap().insert(path, body);
            StatusCode::CREATED.into_response()
        }
        Method::GET => match store.state.blobs.lock().unwrap().get(&path) {
            Some(bytes) => bytes.clone().into_response(),
            None => StatusCode::NOT_FOUND.into_response(),
        },
        Method::DELETE => {
            store.state.blobs.lock().unwrap().remove(&path);
            StatusCode::NO_CONTENT.into_response()
        }
        _ => StatusCode::METHOD_NOT_ALLOWED.into_response(),
    }
}

fn check_admin(store: &BlobStore, headers: &HeaderMap) -> Result<(), StatusCode> {
    let presented = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(store.admin_token.as_str()) {
        Ok(())
    } else {
        Err(StatusCode::UNAUTHORIZED)
    }
}

async fn sign_handler(
    State(store): State<BlobStore>,
    headers: HeaderMap,
    Json(req): Json<SignRequest>,
) -> Result<Json<SignedGrant>, StatusCode> {
    check_admin(&store, &headers)?;
    let ttl = Duration::try_seconds(req.ttl_seconds.min(i64::MAX as u64) as i64)
        .unwrap_or_else(|| Duration::hours(1));
    Ok(Json(store.sign(&req.prefix, &req.methods, ttl)))
}

async fn delete_prefix_handler(
    State(store): State<BlobStore>,
    headers: HeaderMap,
    Json(req): Json<DeletePrefixRequest>,
) -> Result<Json<serde_json::Value>, StatusCode> {
    check_admin(&store, &headers)?;
    let mut blobs = store.state.blobs.lock().unwrap();
    let before = blobs.len();
    blobs.retain(|path, _| !path.starts_with(&req.prefix));
    Ok(Json(serde_json::json!({ "deleted": before - blobs.len() })))
}

/// Client side: minting grants, building signed URLs, and moving bytes.
#[derive(Debug, Clone)]
pub struct BlobStoreClient {
    http: reqwest::Client,
    config: BlobStoreConfig,
}

impl BlobStoreClient {
    pub fn new(config: BlobStoreConfig) -> Self {
        BlobStoreClient { http: reqwest::Client::new(), config }
    }

    pub async fn sign(
        &self,
        prefix: &str,
        methods: &[&str],
        ttl_seconds: u64,
    ) -> Result<SignedGrant, TransportError> {
        let url = format!("{}/admin/sign", self.config.base_url.trim_end_matches('/'));
        let req = SignRequest {
            prefix: prefix.to_string(),
            methods: methods.iter().map(|m| m.to_string()).collect(),
            ttl_seconds,
        };
        let resp = self
            .http
            .post(&url)
            .bearer_auth(&self.config.admin_token)
            .json(&req)
            .send()
            .await?;
        if !resp.status().is_success() {
            return Err(TransportError::BlobStore(format!("sign returned {}", resp.status())));
        }
        Ok(resp.json().await?)
    }

    /// Signed URL for one blob path under a grant.
    pub fn signed_url(&self, path: &str, grant: &SignedGrant) -> String {
        format!(
            "{}/blobs/{}?token={}&expiresAt={}",
            self.config.base_url.trim_end_matches('/'),
            path,
            grant.token,
            grant.expires_at.timestamp()
        )
    }

    pub async fn put_url(&self, url: &str, bytes: Vec<u8>) -> Result<(), TransportError> {
        let resp = self.http.put(url).body(bytes).send().await?;
        if !resp.status().is_success() {
            return Err(TransportError::BlobStore(format!("PUT returned {}", resp.status())));
        }
        Ok(())
    }

    pub async fn get_url(&self, url: &str) -> Result<Vec<u8>, TransportError> {
        let resp = self.http.get(url).send().await?;
        if !resp.status().is_success() {
            return Err(TransportError::BlobStore(format!("GET returned {}", resp.status())));
        }
        Ok(resp.bytes().await?.to_vec())
    }

    pub async fn delete_prefix(&self, prefix: &str) -> Result<u64, TransportError> {
        let url = format!("{}/admin/delete-prefix", self.config.base_url.trim_end_matches('/'));
        let resp = self
            .http
            .post(&url)
            .bearer_auth(&self.config.admin_token)
            .json(&DeletePrefixRequest { prefix: prefix.to_string() })
            .send()
            .await?;
        if !resp.status().is_success() {
            return Err(TransportError::BlobStore(format!(
                "delete-prefix returned {}",
                resp.status()
            )));
        }
        let value: serde_json::Value = resp.json().await?;
        Ok(value["deleted"].as_u64().unwrap_or(0))
    }
}

/// Put and get bare URLs without a client configuration; used by the
/// executor, which only ever holds pre-signed URLs.
pub async fn http_get_bytes(url: &str) -> Result<Vec<u8>, TransportError> {
    let resp = reqwest::get(url).await?;
    if !resp.status().is_success() {
        return Err(TransportError::BlobStore(format!("GET returned {}", resp.status())));
    }
    Ok(resp.bytes().await?.to_vec())
}

pub async fn http_put_bytes(url: &str, bytes: Vec<u8>) -> Result<(), TransportError> {
    let resp = reqwest::Client::new().put(url).body(bytes).send().await?;
    if !resp.status().is_success() {
        return Err(TransportError::BlobStore(format!("PUT returned {}", resp.status())));
    }
    Ok(())
}
