//! HTTP sessions over a tunable knowledge graph.
//!
//! Every session owns one graph. Queries read a committed snapshot; feedback
//! runs a tuning pass on a private copy and swaps it in when the pass
//! finishes, one pass per session at a time. All routes live under `/v1`.

pub mod api;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgtune::inference::answer_query;
use kgtune::kg::{load_graph, save_graph};
use kgtune::optimizer::{tune, TuneRequest, TuningConfig};
use kgtune::{Error, KnowledgeGraph, Scorer, ScoringBackend};
use tokio::sync::oneshot;

use api::*;

/// Seconds a client should wait before retrying after a backend failure.
pub const RETRY_AFTER_SECS: u64 = 5;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Where session graphs are persisted; in memory only when unset.
    pub storage_dir: Option<PathBuf>,
    pub feedback_deadline: Duration,
    pub tuning: TuningConfig,
    pub max_tokens: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            storage_dir: None,
            feedback_deadline: Duration::from_secs(10),
            tuning: TuningConfig::default(),
            max_tokens: 64,
        }
    }
}

#[derive(Debug, Clone)]
struct Interaction {
    query: String,
    subject: String,
}

enum Job {
    Running,
    Done(Result<FeedbackResult, ApiError>),
}

struct Session {
    id: String,
    config: TuningConfig,
    graph: RwLock<Arc<KnowledgeGraph>>,
    writer: Arc<tokio::sync::Mutex<()>>,
    interactions: Mutex<HashMap<String, Interaction>>,
    jobs: Mutex<HashMap<String, Job>>,
    storage: Option<PathBuf>,
    created_ms: u64,
    last_active_ms: AtomicU64,
}

impl Session {
    fn snapshot(&self) -> Arc<KnowledgeGraph> {
        self.graph.read().unwrap().clone()
    }

    fn touch(&self) {
        self.last_active_ms.store(now_ms(), Ordering::Relaxed);
    }
}

pub struct AppState {
    backend: Arc<dyn ScoringBackend>,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(backend: Arc<dyn ScoringBackend>, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            backend,
            config,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        let session = self
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
        session.touch();
        Ok(session)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or_default()
}

/// 128 random bits, hex encoded.
fn random_id() -> String {
    hex::encode(rand::random::<u128>().to_be_bytes())
}

#[derive(Debug, Clone)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
    retry_after: bool,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                kind: kind.to_owned(),
                message: message.into(),
            },
            retry_after: false,
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Validation(_) | Error::Parse { .. } | Error::Dataset { .. } | Error::Json(_) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid", message)
            }
            Error::ExtractionFailure(_) => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "extraction_failure",
                format!("{message}; supply the relations explicitly"),
            ),
            Error::BackendUnavailable(_) | Error::Capability(_) => Self {
                retry_after: true,
                ..Self::new(StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable", message)
            },
            Error::Io { .. } | Error::Config(_) => Self::internal(message),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut response = (self.status, Json(self.body)).into_response();
        if self.retry_after {
            response
                .headers_mut()
                .insert(header::RETRY_AFTER, RETRY_AFTER_SECS.into());
        }
        response
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(session_info))
        .route("/v1/sessions/{id}/query", post(query))
        .route("/v1/sessions/{id}/feedback", post(feedback))
        .route("/v1/sessions/{id}/feedback/{job_id}", get(poll_feedback))
        .route("/v1/sessions/{id}/graph", get(graph))
        .route("/v1/sessions/{id}/journal", get(journal))
        .with_state(state)
}

/// Bind and serve until the process is stopped.
pub async fn serve(addr: &str, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        sessions: app.sessions.read().unwrap().len(),
    })
}

fn load_source(source: GraphSource) -> Result<KnowledgeGraph, Error> {
    match source {
        GraphSource::Empty => Ok(KnowledgeGraph::new()),
        GraphSource::File { path } => Ok(load_graph(std::path::Path::new(&path))?.graph),
        GraphSource::Import { triples, tsv } => {
            let mut graph = match tsv {
                Some(text) => KnowledgeGraph::from_tsv(&text, "request")?.graph,
                None => KnowledgeGraph::new(),
            };
            for z in triples {
                graph.add_triple(z, "import");
            }
            graph.rebase();
            Ok(graph)
        }
    }
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let Json(request) = body?;
    let config = request.config.apply(&app.config.tuning);
    config.validate()?;
    let graph = tokio::task::spawn_blocking(move || load_source(request.graph))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;

    let id = random_id();
    let storage = app.config.storage_dir.as_ref().map(|dir| dir.join(format!("{id}.tsv")));
    if let Some(path) = &storage {
        save_graph(&graph, path)?;
    }
    let created = SessionCreated {
        session_id: id.clone(),
        triples: graph.len(),
        config: config.clone(),
    };
    let now = now_ms();
    let session = Session {
        id: id.clone(),
        config,
        graph: RwLock::new(Arc::new(graph)),
        writer: Arc::new(tokio::sync::Mutex::new(())),
        interactions: Mutex::new(HashMap::new()),
        jobs: Mutex::new(HashMap::new()),
        storage,
        created_ms: now,
        last_active_ms: AtomicU64::new(now),
    };
    app.sessions.write().unwrap().insert(id, Arc::new(session));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn session_info(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let session = app.session(&id)?;
    let interactions = session.interactions.lock().unwrap().len();
    Ok(Json(SessionInfo {
        session_id: session.id.clone(),
        triples: session.snapshot().len(),
        config: session.config.clone(),
        interactions,
        created_ms: session.created_ms,
        last_active_ms: session.last_active_ms.load(Ordering::Relaxed),
    }))
}

async fn query(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<Json<QueryResponse>> {
    let Json(request) = body?;
    let session = app.session(&id)?;
    let graph = session.snapshot();
    let max_tokens = request.max_tokens.unwrap_or(app.config.max_tokens);
    let backend = app.backend.clone();
    let (q, subject) = (request.query.clone(), request.subject.clone());
    let answer = tokio::task::spawn_blocking(move || {
        answer_query(&graph, &q, &subject, &Scorer::new(backend.as_ref()), max_tokens)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;

    let interaction_id = random_id();
    session.interactions.lock().unwrap().insert(
        interaction_id.clone(),
        Interaction {
            query: request.query,
            subject: request.subject,
        },
    );
    Ok(Json(QueryResponse {
        interaction_id,
        answer: answer.answer,
        retrieved: answer.retrieved,
        distribution: answer.distribution,
    }))
}

/// Tune a private copy of the session graph, persist it, then publish it.
/// The caller holds the session's writer lock.
fn run_feedback(
    backend: &dyn ScoringBackend,
    session: &Session,
    interaction: Interaction,
    request: FeedbackRequest,
) -> Result<FeedbackResult, ApiError> {
    let mut working = KnowledgeGraph::clone(&session.snapshot());
    let since = working.last_seq();
    let tune_request = TuneRequest {
        query: interaction.query,
        answer: request.answer,
        subject: interaction.subject,
        object: request.object,
        relations: request.relations,
        interaction: request.interaction_id.clone(),
    };
    let report = tune(&mut working, &tune_request, &session.config, &Scorer::new(backend))?;
    let journal = working.journal_since(since).to_vec();
    if let Some(path) = &session.storage {
        save_graph(&working, path)?;
    }
    *session.graph.write().unwrap() = Arc::new(working);
    Ok(FeedbackResult {
        interaction_id: request.interaction_id,
        report,
        journal,
    })
}

fn job_response(outcome: Result<FeedbackResult, ApiError>) -> Response {
    match outcome {
        Ok(result) => (StatusCode::OK, Json(FeedbackResponse::Completed(result))).into_response(),
        Err(e) => {
            let mut response = e.clone().into_response();
            *response.body_mut() = axum::body::Body::from(
                serde_json::to_vec(&FeedbackResponse::Failed { error: e.body }).unwrap_or_default(),
            );
            response
        }
    }
}

async fn feedback(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(request) = body?;
    let session = app.session(&id)?;
    let interaction = session
        .interactions
        .lock()
        .unwrap()
        .get(&request.interaction_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no interaction {}", request.interaction_id)))?;

    let guard = session.writer.clone().lock_owned().await;
    let job_id = random_id();
    session.jobs.lock().unwrap().insert(job_id.clone(), Job::Running);
    let (done_tx, done_rx) = oneshot::channel();
    {
        let (backend, session, job_id) = (app.backend.clone(), session.clone(), job_id.clone());
        tokio::spawn(async move {
            let worker = session.clone();
            let outcome = tokio::task::spawn_blocking(move || {
                let _guard = guard;
                run_feedback(backend.as_ref(), &worker, interaction, request)
            })
            .await
            .unwrap_or_else(|e| Err(ApiError::internal(e.to_string())));
            session.jobs.lock().unwrap().insert(job_id, Job::Done(outcome));
            let _ = done_tx.send(());
        });
    }

    if tokio::time::timeout(app.config.feedback_deadline, done_rx).await.is_ok() {
        if let Some(Job::Done(outcome)) = session.jobs.lock().unwrap().remove(&job_id) {
            return Ok(job_response(outcome));
        }
    }
    Ok((StatusCode::ACCEPTED, Json(FeedbackResponse::InProgress { job_id })).into_response())
}

async fn poll_feedback(
    State(app): State<Arc<AppState>>,
    Path((id, job_id)): Path<(String, String)>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let mut jobs = session.jobs.lock().unwrap();
    match jobs.get(&job_id) {
        None => Err(ApiError::not_found(format!("no feedback job {job_id}"))),
        Some(Job::Running) => {
            Ok((StatusCode::ACCEPTED, Json(FeedbackResponse::InProgress { job_id })).into_response())
        }
        Some(Job::Done(_)) => match jobs.remove(&job_id) {
            Some(Job::Done(outcome)) => Ok(job_response(outcome)),
            _ => unreachable!(),
        },
    }
}

async fn graph(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(params): Query<GraphQuery>,
) -> ApiResult<Json<GraphResponse>> {
    let graph = app.session(&id)?.snapshot();
    let triples = match &params.subject {
        Some(subject) => graph.triples_from_subject(subject).into_iter().collect(),
        None => graph.iter().cloned().collect(),
    };
    Ok(Json(GraphResponse {
        triples,
        total: graph.len(),
        last_seq: graph.last_seq(),
    }))
}

async fn journal(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(params): Query<JournalQuery>,
) -> ApiResult<Json<JournalResponse>> {
    let graph = app.session(&id)?.snapshot();
    Ok(Json(JournalResponse {
        entries: graph.journal_since(params.since.unwrap_or(0)).to_vec(),
        last_seq: graph.last_seq(),
    }))
}
