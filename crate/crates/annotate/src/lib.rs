//! Labeling service for human-in-the-loop runs.
//!
//! `GET /api/batch` lists the elements still waiting for labels,
//! `POST /api/labels` answers some of them and `GET /api/progress`
//! summarizes the current run from its journal. All state lives in the
//! experiment's journal and the label queue's store, so a restarted service
//! serves the same view.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use altc_core::experiment::{read_journal, JournalEvent, LabelQueue, SubmitError, JOURNAL_DIR};
use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

/// Bind address override, e.g. `0.0.0.0:9000`.
pub const ADDR_ENV: &str = "ALTC_ANNOTATE_ADDR";
/// When set, every request must carry this value in [`TOKEN_HEADER`].
pub const TOKEN_ENV: &str = "ALTC_ANNOTATE_TOKEN";
pub const TOKEN_HEADER: &str = "x-annotate-token";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Clone)]
pub struct ServiceState {
    /// Absent when no experiment is attached.
    pub queue: Option<Arc<LabelQueue>>,
    /// Experiment output directory holding `journals/`.
    pub out: PathBuf,
    pub token: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStatus {
    AwaitingLabels,
    Training,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub id: usize,
    pub text_a: String,
    pub text_b: Option<String>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub round: Option<usize>,
    pub status: BatchStatus,
    pub arm: Option<String>,
    pub run: Option<usize>,
    pub classes: Vec<String>,
    /// Batch size including elements already answered.
    pub size: usize,
    pub tasks: Vec<TaskView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelItem {
    pub id: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    /// Round the answers are meant for; a stale round is refused whole.
    #[serde(default)]
    pub round: Option<usize>,
    pub labels: Vec<LabelItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    pub remaining: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub round: usize,
    pub t_size: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressResponse {
    pub arm: Option<String>,
    pub run: Option<usize>,
    pub rounds: usize,
    pub rounds_done: usize,
    pub t_size: usize,
    pub pending: usize,
    pub finished: bool,
    pub history: Vec<HistoryPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/api/batch", get(batch))
        .route("/api/labels", post(labels))
        .route("/api/progress", get(progress))
        .layer(middleware::from_fn_with_state(state.clone(), check_token))
        .with_state(state)
}

async fn check_token(State(st): State<ServiceState>, req: Request, next: Next) -> Response {
    if let Some(want) = &st.token {
        let got = req
            .headers()
            .get(TOKEN_HEADER)
            .and_then(|v| v.to_str().ok());
        if got != Some(want.as_str()) {
            return error(
                StatusCode::UNAUTHORIZED,
                format!("missing or wrong {TOKEN_HEADER} header"),
            );
        }
    }
    next.run(req).await
}

async fn batch(State(st): State<ServiceState>) -> Response {
    let Some(queue) = &st.queue else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no experiment is attached");
    };
    let body = match queue.pending() {
        Some(p) => BatchResponse {
            round: Some(p.round),
            status: BatchStatus::AwaitingLabels,
            arm: Some(p.arm),
            run: Some(p.run),
            classes: p.classes,
            size: p.size,
            tasks: p
                .tasks
                .into_iter()
                .map(|t| TaskView {
                    id: t.element_id,
                    text_a: t.text_a,
                    text_b: t.text_b,
                    score: t.score,
                })
                .collect(),
        },
        None => BatchResponse {
            round: None,
            status: BatchStatus::Training,
            arm: None,
            run: None,
            classes: queue.classes().to_vec(),
            size: 0,
            tasks: Vec::new(),
        },
    };
    Json(body).into_response()
}

async fn labels(State(st): State<ServiceState>, Json(req): Json<LabelRequest>) -> Response {
    let Some(queue) = st.queue.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no experiment is attached");
    };
    let items: Vec<(usize, String)> = req.labels.into_iter().map(|l| (l.id, l.label)).collect();
    // The store write is blocking file I/O.
    let res = tokio::task::spawn_blocking(move || queue.submit(&items, req.round)).await;
    match res {
        Ok(Ok(out)) => Json(LabelResponse {
            accepted: out.accepted.len(),
            rejected: out
                .rejected
                .into_iter()
                .map(|(id, reason)| Rejection { id, reason })
                .collect(),
            remaining: out.remaining,
        })
        .into_response(),
        Ok(Err(e @ (SubmitError::NoBatch | SubmitError::RoundClosed { .. }))) => {
            error(StatusCode::CONFLICT, e.to_string())
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn progress(State(st): State<ServiceState>) -> Response {
    let pending = st.queue.as_ref().map_or(0, |q| q.progress().pending);
    let current = st
        .queue
        .as_ref()
        .and_then(|q| q.progress().status)
        .map(|s| (s.arm, s.run));
    let out = st.out.clone();
    match tokio::task::spawn_blocking(move || session_progress(&out, current, pending)).await {
        Ok(p) => Json(p).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Summary of one run's journal. `current` picks the run; without it the
/// journal with the highest `(arm_index, run)` is used, which in sequential
/// human mode is the run in progress.
pub fn session_progress(
    out: &Path,
    current: Option<(String, usize)>,
    pending: usize,
) -> ProgressResponse {
    let mut best: Option<((usize, usize), Vec<JournalEvent>)> = None;
    let dir = out.join(JOURNAL_DIR);
    let paths = std::fs::read_dir(&dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok().map(|e| e.path()))
                .collect::<Vec<_>>()
        })
        .unwrap_or_default();
    for path in paths
        .iter()
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
    {
        let Ok(events) = read_journal(path) else {
            continue;
        };
        let Some(JournalEvent::RunStarted {
            arm,
            arm_index,
            run,
            ..
        }) = events.first()
        else {
            continue;
        };
        let rank = (*arm_index, *run);
        let wanted = match &current {
            Some((a, r)) => a == arm && r == run,
            None => best.as_ref().is_none_or(|b| rank > b.0),
        };
        if wanted {
            best = Some((rank, events.clone()));
            if current.is_some() {
                break;
            }
        }
    }
    let mut p = ProgressResponse {
        arm: None,
        run: None,
        rounds: 0,
        rounds_done: 0,
        t_size: 0,
        pending,
        finished: false,
        history: Vec::new(),
    };
    let Some((_, events)) = best else { return p };
    for e in events {
        match e {
            JournalEvent::RunStarted {
                arm,
                run,
                initial_size,
                rounds,
                ..
            } => {
                p.arm = Some(arm);
                p.run = Some(run);
                p.rounds = rounds;
                p.t_size = initial_size;
            }
            JournalEvent::RoundTrained {
                round,
                t_size,
                accuracy,
                ..
            } => p.history.push(HistoryPoint {
                round,
                t_size,
                accuracy,
            }),
            JournalEvent::LabelsReceived { labels, .. } => p.t_size += labels.len(),
            JournalEvent::RoundDone { .. } => p.rounds_done += 1,
            JournalEvent::RunFinished { .. } => p.finished = true,
            _ => {}
        }
    }
    p
}

/// `ALTC_ANNOTATE_ADDR` when set, else `127.0.0.1:8080`; `port` replaces
/// the port of either.
pub fn bind_addr(port: Option<u16>) -> Result<SocketAddr, String> {
    let mut addr = match std::env::var(ADDR_ENV) {
        Ok(s) => s
            .parse::<SocketAddr>()
            .map_err(|e| format!("{ADDR_ENV}=`{s}`: {e}"))?,
        Err(_) => SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), DEFAULT_PORT),
    };
    if let Some(p) = port {
        addr.set_port(p);
    }
    Ok(addr)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: ServiceState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
