//! HTTP front end: explain / retrieve / score endpoints and the review queue,
//! all under `/v1`. Request and response bodies use the dataset field names.

pub mod store;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgexplain::dataset::ExplanationInstance;
use kgexplain::debugger::score_instance;
use kgexplain::embed::Embedder;
use kgexplain::evalkit::{LikertResponse, LikertScores};
use kgexplain::explainer::{refine, ExplainerSettings, RefineOutcome, DEFAULT_TASK_TYPE};
use kgexplain::llm::{ChatClient, RetryPolicy};
use kgexplain::par::Execution;
use kgexplain::pipeline::{ExplainInput, Pipeline};
use kgexplain::prune::QaContext;
use kgexplain::retrieval::{
    build_icl_prompt, retrieve_demos, DemoStore, RetrievalIndex, SelectionWeights,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use store::{Regeneration, ReviewItem, ReviewStatus, ReviewStore, StoreError};

pub const DEFAULT_M: usize = 3;
pub const REVIEW_ID_HEADER: &str = "x-review-id";

/// A dataset of demonstrations and its embedding index.
pub struct Demos {
    pub store: DemoStore,
    pub index: RetrievalIndex,
}

pub struct AppState {
    pub pipeline: Option<Arc<Pipeline>>,
    pub client: Arc<dyn ChatClient>,
    pub embedder: Arc<dyn Embedder>,
    pub demos: Option<Arc<Demos>>,
    pub reviews: Arc<ReviewStore>,
    pub explainer: ExplainerSettings,
    pub debugger_retry: RetryPolicy,
    pub task_type: String,
    /// Enqueue every /explain result for review unless the request says otherwise.
    pub review_mode: bool,
    pub default_m: usize,
    pub execution: Execution,
    inflight: AtomicUsize,
}

impl AppState {
    pub fn new(
        client: Arc<dyn ChatClient>,
        embedder: Arc<dyn Embedder>,
        reviews: Arc<ReviewStore>,
    ) -> Self {
        AppState {
            pipeline: None,
            client,
            embedder,
            demos: None,
            reviews,
            explainer: ExplainerSettings::default(),
            debugger_retry: RetryPolicy::default(),
            task_type: DEFAULT_TASK_TYPE.to_string(),
            review_mode: true,
            default_m: DEFAULT_M,
            execution: Execution::default(),
            inflight: AtomicUsize::new(0),
        }
    }

    /// Number of regenerations still running.
    pub fn regenerations_in_flight(&self) -> usize {
        self.inflight.load(Ordering::SeqCst)
    }

    /// Waits until no regeneration is running.
    pub async fn wait_idle(&self) {
        while self.regenerations_in_flight() > 0 {
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<kgexplain::Error> for ApiError {
    fn from(e: kgexplain::Error) -> Self {
        use kgexplain::Error as E;
        let status = match &e {
            E::NoSeedEntities => StatusCode::UNPROCESSABLE_ENTITY,
            E::Transport(_) | E::Generation(_) | E::Evaluation(_) => StatusCode::BAD_GATEWAY,
            E::Numerical(_) | E::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Conflict(_) => StatusCode::CONFLICT,
            StoreError::Invalid(_) => StatusCode::BAD_REQUEST,
            StoreError::Corrupt { .. } | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("worker failed: {e}"),
        )
    })?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/explain", post(explain))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/score", post(score))
        .route("/v1/review", get(list_reviews).post(enqueue_review))
        .route("/v1/review/next", get(next_review))
        .route("/v1/review/{id}", get(get_review))
        .route("/v1/review/{id}/scores", post(submit_scores))
        .route("/v1/review/{id}/flag", post(flag_review))
        .with_state(state)
}

/// Restarts regenerations interrupted by a shutdown, then serves.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    resume_regenerations(&state);
    axum::serve(listener, router(state)).await
}

pub fn resume_regenerations(state: &Arc<AppState>) {
    for item in state.reviews.awaiting_regeneration() {
        log::info!("resuming regeneration of {}", item.id);
        spawn_regeneration(state.clone(), item);
    }
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "pipeline": st.pipeline.is_some(),
        "index": st.demos.is_some(),
        "llm": st.client.model_id(),
        "embedder": st.embedder.model_id(),
    }))
}

#[derive(Deserialize)]
struct ExplainBody {
    question: String,
    options: Vec<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    review: Option<bool>,
}

async fn explain(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: ExplainBody = parse_body(&body)?;
    QaContext::new(req.question.clone(), req.options.clone(), Vec::new())?;
    let pipeline = st
        .pipeline
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no graph and model loaded"))?;
    let client = st.client.clone();
    let input = ExplainInput {
        question: req.question,
        options: req.options,
        label: req.label,
    };
    let out = blocking(move || Ok(pipeline.explain(&input, client.as_ref())?)).await?;
    let instance = out.instance;
    let review_id = if req.review.unwrap_or(st.review_mode) {
        let reviews = st.reviews.clone();
        let inst = instance.clone();
        Some(blocking(move || Ok(reviews.enqueue(inst)?)).await?.id)
    } else {
        None
    };
    let mut resp = Json(instance).into_response();
    if let Some(id) = review_id {
        if let Ok(v) = HeaderValue::from_str(&id) {
            resp.headers_mut().insert(REVIEW_ID_HEADER, v);
        }
    }
    Ok(resp)
}

#[derive(Deserialize)]
struct RetrieveBody {
    question: String,
    options: Vec<String>,
    #[serde(default)]
    m: Option<usize>,
    #[serde(default)]
    weights: Option<SelectionWeights>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct DemoOut {
    pub rank: usize,
    pub question_id: String,
    pub similarity: f64,
    /// Position of the chosen record in the loaded dataset.
    pub explanation_id: usize,
    pub instance: ExplanationInstance,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct RetrieveOut {
    pub demos: Vec<DemoOut>,
    pub prompt: String,
}

async fn retrieve(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<RetrieveOut>> {
    let req: RetrieveBody = parse_body(&body)?;
    let weights = req.weights.unwrap_or_default();
    weights.validate()?;
    let m = req.m.unwrap_or(st.default_m);
    if m == 0 {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "m must be at least 1",
        ));
    }
    let qa = QaContext::new(req.question, req.options, Vec::new())?;
    let demos = st
        .demos
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no retrieval index loaded"))?;
    let embedder = st.embedder.clone();
    let exec = st.execution;
    let out = blocking(move || {
        let query = embedder.embed_one(&qa.qa_text())?;
        let found = retrieve_demos(&demos.index, &demos.store, &query, m, &weights, exec)?;
        let pairs: Vec<(usize, &ExplanationInstance)> = found
            .iter()
            .map(|d| (d.rank, &demos.store.instances[d.explanation]))
            .collect();
        let prompt = build_icl_prompt(&qa, &pairs)?;
        let demos_out = found
            .iter()
            .map(|d| DemoOut {
                rank: d.rank,
                question_id: d.question_id.clone(),
                similarity: d.similarity,
                explanation_id: d.explanation,
                instance: demos.store.instances[d.explanation].clone(),
            })
            .collect();
        Ok(RetrieveOut {
            demos: demos_out,
            prompt,
        })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ScoreOut {
    pub debugger_score: String,
    pub faithfulness: f64,
    pub completeness: f64,
    pub accuracy: f64,
    pub overall: f64,
}

async fn score(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ScoreOut>> {
    let inst: ExplanationInstance = parse_body(&body)?;
    let client = st.client.clone();
    let retry = st.debugger_retry;
    let s = blocking(move || Ok(score_instance(&inst, client.as_ref(), &retry)?)).await?;
    Ok(Json(ScoreOut {
        debugger_score: s.render(),
        faithfulness: s.faithfulness,
        completeness: s.completeness,
        accuracy: s.accuracy,
        overall: s.overall(),
    }))
}

async fn list_reviews(State(st): State<Arc<AppState>>) -> Json<Vec<ReviewItem>> {
    Json(st.reviews.list())
}

async fn enqueue_review(
    State(st): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<ReviewItem>)> {
    let inst: ExplanationInstance = parse_body(&body)?;
    let reviews = st.reviews.clone();
    let item = blocking(move || Ok(reviews.enqueue(inst)?)).await?;
    Ok((StatusCode::CREATED, Json(item)))
}

async fn next_review(State(st): State<Arc<AppState>>) -> ApiResult<Json<ReviewItem>> {
    st.reviews
        .next_pending()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no pending review items"))
}

async fn get_review(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<ReviewItem>> {
    st.reviews
        .get(&id)
        .map(Json)
        .ok_or_else(|| StoreError::NotFound(id).into())
}

/// All seven ratings are required.
#[derive(Deserialize)]
struct ScoresBody {
    evaluator: String,
    #[serde(flatten)]
    scores: LikertScores,
}

async fn submit_scores(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<ReviewItem>> {
    let req: ScoresBody = parse_body(&body)?;
    req.scores.validate()?;
    let response = LikertResponse {
        evaluator: req.evaluator,
        instance: id.clone(),
        scores: req.scores,
    };
    let reviews = st.reviews.clone();
    let item = blocking(move || Ok(reviews.submit_scores(&id, response)?)).await?;
    Ok(Json(item))
}

#[derive(Deserialize)]
struct FlagBody {
    notes: Vec<String>,
}

async fn flag_review(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<ReviewItem>)> {
    let req: FlagBody = parse_body(&body)?;
    let notes: Vec<String> = req
        .notes
        .into_iter()
        .map(|n| n.trim().to_string())
        .filter(|n| !n.is_empty())
        .collect();
    if notes.is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "a flag needs at least one note",
        ));
    }
    let reviews = st.reviews.clone();
    let bound = st.explainer.max_refinements;
    let (item, regenerate) = blocking(move || Ok(reviews.flag(&id, notes, bound)?)).await?;
    if regenerate {
        spawn_regeneration(st.clone(), item.clone());
    }
    Ok((StatusCode::ACCEPTED, Json(item)))
}

fn spawn_regeneration(st: Arc<AppState>, item: ReviewItem) {
    st.inflight.fetch_add(1, Ordering::SeqCst);
    tokio::task::spawn_blocking(move || {
        let outcome = regenerate(&st, &item);
        if let Err(e) = st.reviews.finish_regeneration(&item.id, outcome) {
            log::error!("could not record regeneration of {}: {e}", item.id);
        }
        st.inflight.fetch_sub(1, Ordering::SeqCst);
    });
}

fn regenerate(st: &AppState, item: &ReviewItem) -> Regeneration {
    let client = st.client.as_ref();
    match refine(
        &item.instance,
        item.revision(),
        &item.pending_notes,
        client,
        &st.explainer,
        &st.task_type,
    ) {
        Ok(RefineOutcome::Regenerated(mut inst)) => {
            match score_instance(&inst, client, &st.debugger_retry) {
                Ok(s) => {
                    inst.debugger_score = s.render();
                    Regeneration::Replaced(inst)
                }
                Err(e) => Regeneration::Failed(e.to_string()),
            }
        }
        Ok(RefineOutcome::NeedsManualReview) => Regeneration::NeedsManualReview,
        Err(e) => Regeneration::Failed(e.to_string()),
    }
}
