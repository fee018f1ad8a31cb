use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::json;

use juvenotes_core::domain::{FlagId, InstitutionId, JobId, PastPaperId, QuestionId, QuestionKind, QuestionState};
use juvenotes_core::engagement::{DateRange, FlagOutcome};
use juvenotes_core::store::{QuestionFilter, DEFAULT_PAGE_SIZE};
use juvenotes_core::sync::SyncOp;

use crate::auth::Principal;
use crate::error::{ApiError, ApiJson, ApiQuery};
use crate::AppState;

type ApiResult<T> = Result<T, ApiError>;

/// Runs a store call off the async executor.
pub(crate) async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> juvenotes_core::Result<T> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
    }
}

pub async fn health() -> impl IntoResponse {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    page: Option<u32>,
    page_size: Option<u32>,
}

pub async fn paper_questions(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    Path(id): Path<String>,
    ApiQuery(q): ApiQuery<PageQuery>,
) -> ApiResult<impl IntoResponse> {
    let paper = PastPaperId::from(id);
    let page = blocking(move || {
        state.store.paper(&paper)?;
        let filter = QuestionFilter {
            paper: Some(paper),
            page: q.page.unwrap_or(1),
            page_size: q.page_size.unwrap_or(DEFAULT_PAGE_SIZE),
            ..QuestionFilter::default()
        };
        state.store.query_questions(&filter, principal.role)
    })
    .await?;
    Ok(Json(page))
}

#[derive(Debug, Deserialize)]
pub struct CoursesQuery {
    institution: Option<String>,
}

pub async fn courses(
    State(state): State<Arc<AppState>>,
    _principal: Principal,
    ApiQuery(q): ApiQuery<CoursesQuery>,
) -> ApiResult<impl IntoResponse> {
    let institution = q.institution.filter(|i| !i.is_empty()).map(InstitutionId::from);
    let courses = blocking(move || state.store.list_courses(institution.as_ref())).await?;
    Ok(Json(json!({ "items": courses })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseBody {
    kind: QuestionKind,
    chosen_index: Option<i64>,
    parts: Option<Vec<String>>,
    #[serde(default)]
    self_correct: bool,
}

pub async fn respond(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<ResponseBody>,
) -> ApiResult<impl IntoResponse> {
    let question = QuestionId::from(id);
    let user = principal.user_id;
    match (body.kind, body.chosen_index, body.parts) {
        (QuestionKind::Mcq, Some(chosen), None) => {
            let outcome = blocking(move || state.store.record_mcq_response(&user, &question, chosen)).await?;
            Ok((StatusCode::CREATED, Json(json!(outcome))))
        }
        (QuestionKind::Saq, None, Some(parts)) => {
            blocking(move || state.store.record_saq_response(&user, &question, &parts, body.self_correct)).await?;
            Ok((StatusCode::CREATED, Json(json!({ "recorded": true }))))
        }
        (QuestionKind::Mcq, ..) => Err(ApiError::invalid("an mcq response carries chosen_index only")),
        (QuestionKind::Saq, ..) => Err(ApiError::invalid("an saq response carries parts only")),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackBody {
    rating: i64,
    #[serde(default)]
    comment: Option<String>,
}

pub async fn feedback(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<FeedbackBody>,
) -> ApiResult<impl IntoResponse> {
    let question = QuestionId::from(id);
    let saved = blocking(move || {
        state.store.record_feedback(&principal.user_id, &question, body.rating, body.comment.as_deref())
    })
    .await?;
    Ok(Json(saved))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagBody {
    reason: String,
}

pub async fn raise_flag(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<FlagBody>,
) -> ApiResult<impl IntoResponse> {
    let question = QuestionId::from(id);
    let flag = blocking(move || state.store.flag_question(&principal.user_id, &question, &body.reason)).await?;
    Ok((StatusCode::CREATED, Json(flag)))
}

pub async fn open_flags(State(state): State<Arc<AppState>>, principal: Principal) -> ApiResult<impl IntoResponse> {
    principal.require_reviewer()?;
    let flags = blocking(move || state.store.open_flags()).await?;
    Ok(Json(json!({ "items": flags })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolveBody {
    outcome: FlagOutcome,
}

#[derive(Debug, Serialize)]
struct Resolution {
    flag_id: FlagId,
    question_state: QuestionState,
}

pub async fn resolve_flag(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<ResolveBody>,
) -> ApiResult<impl IntoResponse> {
    let flag = FlagId::from(id);
    let question_state = {
        let flag = flag.clone();
        blocking(move || state.store.resolve_flag(&principal.user_id, &flag, body.outcome)).await?
    };
    Ok(Json(Resolution { flag_id: flag, question_state }))
}

pub async fn publish(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    let question = QuestionId::from(id);
    let q = blocking(move || {
        state.store.publish_question(&principal.user_id, &question)?;
        state.store.question(&question)
    })
    .await?;
    Ok(Json(q))
}

pub async fn job(
    State(state): State<Arc<AppState>>,
    _principal: Principal,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    let job = JobId::from(id);
    let status = blocking(move || state.pipeline.job_status(&job)).await?;
    Ok(Json(status))
}

#[derive(Debug, Deserialize)]
pub struct RangeQuery {
    from: String,
    to: String,
    baseline_from: Option<String>,
    baseline_to: Option<String>,
}

impl RangeQuery {
    fn range(&self) -> ApiResult<DateRange> {
        Ok(DateRange::parse(&self.from, &self.to)?)
    }

    fn baseline(&self) -> ApiResult<Option<DateRange>> {
        match (&self.baseline_from, &self.baseline_to) {
            (None, None) => Ok(None),
            (Some(f), Some(t)) => Ok(Some(DateRange::parse(f, t)?)),
            _ => Err(ApiError::invalid("baseline_from and baseline_to go together")),
        }
    }
}

pub async fn dau(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    ApiQuery(q): ApiQuery<RangeQuery>,
) -> ApiResult<impl IntoResponse> {
    principal.require_reviewer()?;
    let (range, baseline) = (q.range()?, q.baseline()?);
    let report = blocking(move || state.store.daily_active_users(&range, baseline.as_ref())).await?;
    Ok(Json(report))
}

pub async fn processing(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    ApiQuery(q): ApiQuery<RangeQuery>,
) -> ApiResult<impl IntoResponse> {
    principal.require_reviewer()?;
    let range = q.range()?;
    let stats = blocking(move || state.store.processing_time_stats(&range)).await?;
    Ok(Json(stats))
}

pub async fn satisfaction(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    ApiQuery(q): ApiQuery<RangeQuery>,
) -> ApiResult<impl IntoResponse> {
    principal.require_reviewer()?;
    let range = q.range()?;
    let summary = blocking(move || state.store.satisfaction_summary(&range)).await?;
    Ok(Json(summary))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushBody {
    ops: Vec<SyncOp>,
}

pub async fn sync_push(
    State(state): State<Arc<AppState>>,
    principal: Principal,
    ApiJson(body): ApiJson<PushBody>,
) -> ApiResult<impl IntoResponse> {
    let results = blocking(move || state.store.sync_push(&principal.user_id, &body.ops)).await?;
    Ok(Json(json!({ "results": results })))
}

#[derive(Debug, Deserialize)]
pub struct PullQuery {
    cursor: Option<String>,
}

pub async fn sync_pull(
    State(state): State<Arc<AppState>>,
    _principal: Principal,
    ApiQuery(q): ApiQuery<PullQuery>,
) -> ApiResult<impl IntoResponse> {
    let changes = blocking(move || state.store.sync_pull(q.cursor.as_deref().filter(|c| !c.is_empty()))).await?;
    Ok(Json(changes))
}

pub async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not-found", "no such route")
}
