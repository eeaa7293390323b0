//! Admin HTTP/JSON API.
//!
//! - `GET /status`
//! - `GET /agents/{id}/log`
//! - `POST /agents/{id}/move` `{dest}` → 202
//! - `POST /trust` (bearer token) with a certificate body
//! - `GET /events[?follow=true&since=SEQ]` → newline-delimited JSON

// Handlers return ready-made error responses.
#![allow(clippy::result_large_err)]

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::broadcast::error::RecvError;

use super::{error_body, Shared, StationError, StationEvent};
use crate::security::Certificate;
use crate::wire::AgentId;

type S = State<Arc<Shared>>;

fn error(status: StatusCode, code: &str, message: impl std::fmt::Display) -> Response {
    (status, Json(error_body(code, message))).into_response()
}

pub(crate) async fn serve(shared: Arc<Shared>, listener: TcpListener) {
    let app = Router::new()
        .route("/status", get(status))
        .route("/agents/{id}/log", get(agent_log))
        .route("/agents/{id}/move", post(agent_move))
        .route("/trust", post(trust))
        .route("/events", get(events))
        .with_state(shared);
    if let Err(e) = axum::serve(listener, app).await {
        tracing::warn!("admin server stopped: {e}");
    }
}

async fn status(State(s): S) -> Response {
    Json(s.status()).into_response()
}

fn parse_agent(id: &str) -> Result<AgentId, Response> {
    id.parse().map_err(|_| error(StatusCode::BAD_REQUEST, "BAD_AGENT_ID", format!("{id:?} is not an agent id")))
}

async fn agent_log(State(s): S, Path(id): Path<String>) -> Response {
    let agent = match parse_agent(&id) {
        Ok(a) => a,
        Err(r) => return r,
    };
    match s.travel_log(&agent) {
        Some(log) => Json(json!({ "agent_id": agent, "station_id": s.cfg.station_id, "travel_log": log })).into_response(),
        None => error(StatusCode::NOT_FOUND, "NOT_FOUND", format!("agent {agent} is not known here")),
    }
}

#[derive(Deserialize)]
struct MoveBody {
    dest: String,
}

async fn agent_move(State(s): S, Path(id): Path<String>, Json(body): Json<MoveBody>) -> Response {
    let agent = match parse_agent(&id) {
        Ok(a) => a,
        Err(r) => return r,
    };
    match s.request_move(&agent, &body.dest, false) {
        Ok(()) => (StatusCode::ACCEPTED, Json(json!({ "agent_id": agent, "dest": body.dest }))).into_response(),
        Err((status, code, message)) => error(StatusCode::from_u16(status).unwrap_or(StatusCode::CONFLICT), code, message),
    }
}

/// Adds a certificate to the trust store and persists it.
pub(crate) fn accept_cert(shared: &Shared, cert: &Certificate) -> Result<bool, StationError> {
    if !cert.fingerprint_is_valid() {
        return Err(StationError::Config("certificate fingerprint does not match its contents".into()));
    }
    let mut trust = shared.trust.write().unwrap();
    let added = trust.accept(cert);
    if added {
        trust.save(&shared.cfg.trust_store_path)?;
        shared.events.emit("TRUST_ACCEPTED", None, json!({ "fingerprint": cert.fingerprint, "subject": cert.subject }));
    }
    Ok(added)
}

async fn trust(State(s): S, headers: HeaderMap, body: Bytes) -> Response {
    let presented = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
    match (&s.cfg.admin_token, presented) {
        (Some(expected), Some(got)) if expected == got => {}
        (None, _) => return error(StatusCode::FORBIDDEN, "FORBIDDEN", "trust mutations are disabled: no admin token configured"),
        _ => return error(StatusCode::FORBIDDEN, "FORBIDDEN", "missing or wrong admin token"),
    }
    let cert: Certificate = match serde_json::from_slice(&body) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, "BAD_CERTIFICATE", e),
    };
    match accept_cert(&s, &cert) {
        Ok(added) => Json(json!({ "fingerprint": cert.fingerprint, "added": added })).into_response(),
        Err(StationError::Config(m)) => error(StatusCode::BAD_REQUEST, "BAD_CERTIFICATE", m),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR", e),
    }
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    follow: bool,
    #[serde(default)]
    since: u64,
}

fn ndjson(e: &StationEvent) -> Result<Bytes, Infallible> {
    let mut line = serde_json::to_vec(e).expect("event serializes");
    line.push(b'\n');
    Ok(Bytes::from(line))
}

async fn events(State(s): S, Query(q): Query<EventsQuery>) -> Response {
    let (history, rx) = s.events.follow();
    let since = q.since;
    let head = futures::stream::iter(history.into_iter().filter(move |e| e.seq > since).map(|e| ndjson(&e)));
    let body = if q.follow {
        // A follower that lags behind the buffer is cut off and must re-read.
        let live = futures::stream::unfold(rx, |mut rx| async move {
            match rx.recv().await {
                Ok(e) => Some((ndjson(&e), rx)),
                Err(RecvError::Lagged(_) | RecvError::Closed) => None,
            }
        });
        Body::from_stream(head.chain(live))
    } else {
        Body::from_stream(head)
    };
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}
