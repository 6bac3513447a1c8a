//! HTTP surface. Every route except /health and /console requires a bearer
//! token; roles are checked before the plane is touched.

use std::collections::BTreeMap;
use std::path::{Component, Path as FsPath};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, MatchedPath, Path, Query, Request, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pdp_core::audit::{AuditFilter, Category};
use pdp_core::bls::Behavior;
use pdp_core::bus::{AckResult, PlanStatus, ServiceRegistration, ServiceStatus};
use pdp_core::consent::Grantor;
use pdp_core::plane::{DataPlane, Registration};
use pdp_core::request::{GdprRequest, RequestPayload, RequestState, Verdict};
use pdp_core::restriction::Scope;
use pdp_core::Timestamp;
use pdp_core::{
    Actor, Error, Pseudonym, PurposeId, RegionCode, RequestId, RestrictionId, Role, ServiceId,
    SnapshotId,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::AppState;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/subjects", post(register_subject))
        .route("/subjects/{p}", get(resolve_subject))
        .route("/subjects/{p}/export", get(subject_export))
        .route("/subjects/{p}/gate", get(subject_gate))
        .route(
            "/consents",
            get(list_consents)
                .post(grant_consent)
                .delete(cancel_consent),
        )
        .route(
            "/restrictions",
            get(list_restrictions).post(place_restriction),
        )
        .route(
            "/restrictions/{id}",
            axum::routing::delete(lift_restriction),
        )
        .route("/requests", get(list_requests).post(submit_request))
        .route("/requests/overdue", get(overdue_requests))
        .route("/requests/{id}", get(get_request))
        .route("/requests/{id}/decision", post(decide_request))
        .route("/requests/{id}/execute", post(execute_request))
        .route("/requests/{id}/export", get(request_export))
        .route("/audit", get(query_audit))
        .route("/services", get(list_services).post(register_service))
        .route("/services/{id}/status", post(service_status))
        .route("/services/{id}/behavior", post(service_behavior))
        .route("/services/{id}/records", post(service_records))
        .route("/transfers", post(transfer))
        .route("/disclosures", post(disclosure))
        .route("/admin/retention-scan", post(retention_scan))
        .route("/admin/minimization-report", get(minimization_report))
        .route("/admin/staging-snapshot", post(staging_snapshot))
        .route("/admin/backup", post(backup))
        .route("/admin/restore", post(restore))
        .route("/console", get(console_index))
        .route("/console/{*path}", get(console_asset))
        .with_state(state)
}

// ---- errors ---------------------------------------------------------------

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
    pub detail: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
            detail: None,
        }
    }

    fn forbidden(role: Role) -> Self {
        Self::new(
            StatusCode::FORBIDDEN,
            "Unauthorized",
            format!("role `{role}` may not call this endpoint"),
        )
    }

    fn not_found(kind: &'static str) -> Self {
        Self::new(StatusCode::NOT_FOUND, kind, "not found")
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    use Error::*;
    match e {
        Unauthorized(_) | UnauthorizedCanceller => StatusCode::FORBIDDEN,
        UnknownPseudonym | UnknownRequest | UnknownRestriction | UnknownService(_)
        | UnknownCommand | UnknownSnapshot(_) => StatusCode::NOT_FOUND,
        InvalidTransition { .. }
        | BlockedByRestriction
        | DuplicateScope
        | NotActive
        | AlreadyActive
        | NoActiveConsent
        | DuplicateIdentity(_)
        | DuplicateServiceId(_)
        | RestrictedData
        | StorageNotEmpty => StatusCode::CONFLICT,
        PropagationFailed { .. } => StatusCode::BAD_GATEWAY,
        MissingConsent(_)
        | RegionNotAllowed(_)
        | EmptyChangeSet
        | UnknownPurpose(_)
        | MinorRequiresGuardian
        | MalformedPayload(_)
        | InvalidPseudonym(_)
        | InvalidRegion(_)
        | HygieneViolation(_)
        | UnknownAction(_) => StatusCode::UNPROCESSABLE_ENTITY,
        StorageUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        CorruptJournal { .. } | Io(_) | Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let detail = match &e {
            Error::PropagationFailed {
                correlation,
                missing,
                refused,
            } => {
                Some(json!({ "correlation": correlation, "missing": missing, "refused": refused }))
            }
            _ => None,
        };
        Self {
            status: status_of(&e),
            kind: e.kind(),
            message: e.to_string(),
            detail,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.kind, "message": self.message });
        if let Some(d) = self.detail {
            body["detail"] = d;
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

// ---- extractors -----------------------------------------------------------

/// The authenticated caller.
pub struct Caller(pub Actor);

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(
        parts: &mut Parts,
        state: &AppState,
    ) -> Result<Self, Self::Rejection> {
        let unauthenticated = || {
            ApiError::new(
                StatusCode::UNAUTHORIZED,
                "Unauthenticated",
                "missing or unknown bearer token",
            )
        };
        let header = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|h| h.to_str().ok())
            .ok_or_else(unauthenticated)?;
        let token = header.strip_prefix("Bearer ").ok_or_else(unauthenticated)?;
        let actor = state
            .config
            .actor(token.trim())
            .ok_or_else(unauthenticated)?;
        let route = parts
            .extensions
            .get::<MatchedPath>()
            .map(|m| m.as_str())
            .unwrap_or("");
        if !roles_for(parts.method.as_str(), route).contains(&actor.role) {
            return Err(ApiError::forbidden(actor.role));
        }
        Ok(Caller(actor))
    }
}

/// JSON body whose rejection is reported in the API error shape.
pub struct Body<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|e: JsonRejection| {
                ApiError::new(StatusCode::BAD_REQUEST, "MalformedPayload", e.body_text())
            })
    }
}

pub struct Params<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequestParts<S> for Params<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        Query::<T>::from_request_parts(parts, state)
            .await
            .map(|Query(v)| Params(v))
            .map_err(|e: QueryRejection| {
                ApiError::new(StatusCode::BAD_REQUEST, "MalformedPayload", e.body_text())
            })
    }
}

// ---- role checks ----------------------------------------------------------

use Role::{Admin, Developer, Support, User};

/// Route-level role matrix, enforced before any body is parsed. Handlers add
/// ownership checks for `User`. Routes missing here are denied.
pub const ACCESS: &[(&str, &str, &[Role])] = &[
    ("POST", "/subjects", &[Admin]),
    ("GET", "/subjects/{p}", &[Admin, Support]),
    ("GET", "/subjects/{p}/export", &[User]),
    ("GET", "/subjects/{p}/gate", &[Admin, Support, User]),
    ("GET", "/consents", &[Admin, Support, User]),
    ("POST", "/consents", &[User]),
    ("DELETE", "/consents", &[User]),
    ("GET", "/restrictions", &[Admin, Support, User]),
    ("POST", "/restrictions", &[Admin]),
    ("DELETE", "/restrictions/{id}", &[Admin]),
    ("GET", "/requests", &[Admin, User]),
    ("POST", "/requests", &[User]),
    ("GET", "/requests/overdue", &[Admin]),
    ("GET", "/requests/{id}", &[Admin, User]),
    ("POST", "/requests/{id}/decision", &[Admin]),
    ("POST", "/requests/{id}/execute", &[Admin]),
    ("GET", "/requests/{id}/export", &[User]),
    ("GET", "/audit", &[Admin, Support]),
    ("GET", "/services", &[Admin]),
    ("POST", "/services", &[Admin]),
    ("POST", "/services/{id}/status", &[Admin]),
    ("POST", "/services/{id}/behavior", &[Admin]),
    ("POST", "/services/{id}/records", &[Admin]),
    ("POST", "/transfers", &[Admin]),
    ("POST", "/disclosures", &[Admin]),
    ("POST", "/admin/retention-scan", &[Admin]),
    ("GET", "/admin/minimization-report", &[Admin]),
    ("POST", "/admin/staging-snapshot", &[Admin]),
    ("POST", "/admin/backup", &[Admin]),
    ("POST", "/admin/restore", &[Admin]),
];

/// Developers hold tokens but reach no data endpoint.
const _: () = {
    let mut i = 0;
    while i < ACCESS.len() {
        let roles = ACCESS[i].2;
        let mut j = 0;
        while j < roles.len() {
            assert!(!matches!(roles[j], Developer));
            j += 1;
        }
        i += 1;
    }
};

pub fn roles_for(method: &str, route: &str) -> &'static [Role] {
    ACCESS
        .iter()
        .find(|(m, r, _)| *m == method && *r == route)
        .map(|(_, _, roles)| *roles)
        .unwrap_or(&[])
}

/// Users may only touch their own pseudonym.
fn own(actor: &Actor, p: &Pseudonym) -> ApiResult<()> {
    match actor.role {
        Role::User if actor.pseudonym.as_ref() == Some(p) => Ok(()),
        _ => Err(ApiError::forbidden(actor.role)),
    }
}

/// Listed roles see everything; users only their own subject.
fn own_or(actor: &Actor, p: &Pseudonym, roles: &[Role]) -> ApiResult<()> {
    if roles.contains(&actor.role) {
        Ok(())
    } else {
        own(actor, p)
    }
}

fn parse_pseudonym(s: &str) -> ApiResult<Pseudonym> {
    Ok(Pseudonym::parse(s)?)
}

impl AppState {
    /// Runs `f` under the plane lock with the current time.
    fn with<T>(
        &self,
        f: impl FnOnce(&mut DataPlane, Timestamp) -> pdp_core::Result<T>,
    ) -> ApiResult<T> {
        let now = (self.clock)();
        let mut plane = self.plane.lock().unwrap_or_else(|e| e.into_inner());
        Ok(f(&mut plane, now)?)
    }
}

fn created<T: Serialize>(v: T) -> Response {
    (StatusCode::CREATED, Json(v)).into_response()
}

// ---- health and console ---------------------------------------------------

async fn health(State(s): State<AppState>) -> ApiResult<Json<Value>> {
    s.with(|plane, _| {
        Ok(Json(json!({
            "status": "ok",
            "subjects": plane.vault().len(),
            "requests": plane.requests().len(),
            "journal_seq": plane.journal().last_seq(),
        })))
    })
}

async fn console_index(state: State<AppState>) -> ApiResult<Response> {
    console_asset(state, Path("index.html".into())).await
}

async fn console_asset(State(s): State<AppState>, Path(path): Path<String>) -> ApiResult<Response> {
    let root = s
        .config
        .console_dir
        .as_ref()
        .ok_or_else(|| ApiError::not_found("UnknownAsset"))?;
    let rel = FsPath::new(&path);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(ApiError::not_found("UnknownAsset"));
    }
    let full = root.join(rel);
    let bytes = tokio::fs::read(&full)
        .await
        .map_err(|_| ApiError::not_found("UnknownAsset"))?;
    let mime = match full.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    };
    Ok(([(CONTENT_TYPE, mime)], bytes).into_response())
}

// ---- subjects -------------------------------------------------------------

async fn register_subject(
    State(s): State<AppState>,
    _: Caller,
    Body(reg): Body<Registration>,
) -> ApiResult<Response> {
    let p = s.with(|plane, now| plane.register_subject(reg, now))?;
    Ok(created(json!({ "pseudonym": p })))
}

async fn resolve_subject(
    State(s): State<AppState>,
    Caller(a): Caller,
    Path(p): Path<String>,
) -> ApiResult<Response> {
    let p = parse_pseudonym(&p)?;
    let record = s.with(|plane, now| plane.resolve(&p, a.role, now))?;
    Ok(Json(record).into_response())
}

async fn subject_export(
    State(s): State<AppState>,
    Caller(a): Caller,
    Path(p): Path<String>,
) -> ApiResult<Response> {
    let p = parse_pseudonym(&p)?;
    own(&a, &p)?;
    let doc = s.with(|plane, now| plane.subject_document(&p, now))?;
    Ok(Json(doc).into_response())
}

#[derive(Deserialize)]
struct GateQuery {
    purpose: PurposeId,
}

async fn subject_gate(
    State(s): State<AppState>,
    Caller(a): Caller,
    Path(p): Path<String>,
    Params(q): Params<GateQuery>,
) -> ApiResult<Response> {
    let p = parse_pseudonym(&p)?;
    own_or(&a, &p, &[Role::Admin, Role::Support])?;
    let gate = s.with(|plane, now| {
        plane.vault().get(&p)?;
        Ok(plane.processing_gate(&p, &q.purpose, now))
    })?;
    Ok(Json(json!({ "consent": gate.consent, "restriction": gate.restriction, "allowed": gate.allowed() })).into_response())
}

// ---- consents -------------------------------------------------------------

#[derive(Deserialize)]
struct SubjectQuery {
    pseudonym: Pseudonym,
}

async fn list_consents(
    State(s): State<AppState>,
    Caller(a): Caller,
    Params(q): Params<SubjectQuery>,
) -> ApiResult<Response> {
    own_or(&a, &q.pseudonym, &[Role::Admin, Role::Support])?;
    let list = s.with(|plane, _| {
        Ok(plane
            .consents()
            .for_subject(&q.pseudonym)
            .cloned()
            .collect::<Vec<_>>())
    })?;
    Ok(Json(list).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConsentBody {
    pseudonym: Pseudonym,
    purpose: PurposeId,
    #[serde(default)]
    signature: Option<String>,
}

/// The caller acts for itself, or as the recorded guardian of `p`.
fn grantor_for(plane: &DataPlane, actor: &Actor, p: &Pseudonym) -> ApiResult<Grantor> {
    let me = match (&actor.role, &actor.pseudonym) {
        (Role::User, Some(me)) => me,
        _ => return Err(ApiError::forbidden(actor.role)),
    };
    if me == p {
        return Ok(Grantor::Subject);
    }
    let record = plane
        .vault()
        .get(p)
        .map_err(|_| ApiError::forbidden(actor.role))?;
    if record.profile.guardian.as_ref() == Some(me) {
        Ok(Grantor::Guardian(me.clone()))
    } else {
        Err(ApiError::forbidden(actor.role))
    }
}

async fn grant_consent(
    State(s): State<AppState>,
    Caller(a): Caller,
    Body(b): Body<ConsentBody>,
) -> ApiResult<Response> {
    let now = (s.clock)();
    let mut plane = s.plane.lock().unwrap_or_else(|e| e.into_inner());
    let grantor = grantor_for(&plane, &a, &b.pseudonym)?;
    let consent = plane.grant_consent(&b.pseudonym, &b.purpose, grantor, b.signature, now)?;
    Ok(created(consent))
}

async fn cancel_consent(
    State(s): State<AppState>,
    Caller(a): Caller,
    Body(b): Body<ConsentBody>,
) -> ApiResult<Response> {
    let now = (s.clock)();
    let mut plane = s.plane.lock().unwrap_or_else(|e| e.into_inner());
    let canceller = grantor_for(&plane, &a, &b.pseudonym)?;
    let consent = plane.cancel_consent(&b.pseudonym, &b.purpose, &canceller, now)?;
    Ok(Json(consent).into_response())
}

// ---- restrictions ---------------------------------------------------------

async fn list_restrictions(
    State(s): State<AppState>,
    Caller(a): Caller,
    Params(q): Params<SubjectQuery>,
) -> ApiResult<Response> {
    own_or(&a, &q.pseudonym, &[Role::Admin, Role::Support])?;
    let list = s.with(|plane, _| {
        Ok(plane
            .restrictions()
            .for_subject(&q.pseudonym)
            .cloned()
            .collect::<Vec<_>>())
    })?;
    Ok(Json(list).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RestrictionBody {
    pseudonym: Pseudonym,
    scope: Scope,
    reason: String,
}

async fn place_restriction(
    State(s): State<AppState>,
    _: Caller,
    Body(b): Body<RestrictionBody>,
) -> ApiResult<Response> {
    let r = s.with(|plane, now| plane.place_restriction(&b.pseudonym, b.scope, &b.reason, now))?;
    Ok(created(r))
}

async fn lift_restriction(
    State(s): State<AppState>,
    _: Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let id = RestrictionId::new(id);
    let r = s.with(|plane, now| plane.lift_restriction(&id, now))?;
    Ok(Json(r).into_response())
}

// ---- requests -------------------------------------------------------------

async fn submit_request(
    State(s): State<AppState>,
    Caller(a): Caller,
    Body(payload): Body<RequestPayload>,
) -> ApiResult<Response> {
    let p = a
        .pseudonym
        .clone()
        .ok_or_else(|| ApiError::forbidden(a.role))?;
    let r = s.with(|plane, now| plane.submit_request(&p, payload, now))?;
    Ok(created(r))
}

#[derive(Deserialize)]
struct StateQuery {
    #[serde(default)]
    state: Option<String>,
}

async fn list_requests(
    State(s): State<AppState>,
    Caller(a): Caller,
    Params(q): Params<StateQuery>,
) -> ApiResult<Response> {
    let state = match q.state.as_deref() {
        None => None,
        Some(name) => Some(RequestState::parse_name(name).ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "MalformedPayload",
                "unknown request state",
            )
        })?),
    };
    let list = s.with(|plane, _| {
        Ok(plane
            .requests()
            .list(state)
            .into_iter()
            .filter(|r| a.role == Role::Admin || a.pseudonym.as_ref() == Some(&r.pseudonym))
            .cloned()
            .collect::<Vec<_>>())
    })?;
    Ok(Json(list).into_response())
}

async fn overdue_requests(State(s): State<AppState>, _: Caller) -> ApiResult<Response> {
    let list =
        s.with(|plane, now| Ok(plane.overdue(now).into_iter().cloned().collect::<Vec<_>>()))?;
    Ok(Json(list).into_response())
}

#[derive(Serialize)]
struct ServiceAck {
    service: ServiceId,
    /// `done`, `refused`, `missing` or `pending`.
    state: &'static str,
    attempts: u32,
}

#[derive(Serialize)]
struct Propagation {
    command: String,
    action: &'static str,
    status: &'static str,
    services: Vec<ServiceAck>,
}

#[derive(Serialize)]
struct RequestView {
    request: GdprRequest,
    overdue: bool,
    propagation: Vec<Propagation>,
}

/// A request with its per-service ack checklist. Ack payloads are omitted.
fn request_view(plane: &DataPlane, r: &GdprRequest, now: Timestamp) -> RequestView {
    let propagation = r
        .commands
        .iter()
        .filter_map(|c| plane.bus().plan(c))
        .map(|plan| Propagation {
            command: plan.command.command_id.to_string(),
            action: plan.command.action.name(),
            status: match plan.status() {
                PlanStatus::Pending { .. } => "pending",
                PlanStatus::Complete => "complete",
                PlanStatus::CompleteWithFailure { .. } => "complete_with_failure",
            },
            services: plan
                .targets
                .iter()
                .map(|svc| ServiceAck {
                    service: svc.clone(),
                    state: match plan.acks.get(svc).map(|a| &a.result) {
                        Some(AckResult::Done { .. }) => "done",
                        Some(AckResult::Refused { .. }) => "refused",
                        None if plan.exhausted.contains(svc) => "missing",
                        None => "pending",
                    },
                    attempts: plan.attempts.get(svc).copied().unwrap_or(0),
                })
                .collect(),
        })
        .collect();
    RequestView {
        request: r.clone(),
        overdue: !r.state.is_terminal() && r.deadline < now,
        propagation,
    }
}

fn load_request<'a>(plane: &'a DataPlane, a: &Actor, id: &RequestId) -> ApiResult<&'a GdprRequest> {
    let r = plane.requests().get(id)?;
    own_or(a, &r.pseudonym, &[Role::Admin])?;
    Ok(r)
}

async fn get_request(
    State(s): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let id = RequestId::new(id);
    let now = (s.clock)();
    let plane = s.plane.lock().unwrap_or_else(|e| e.into_inner());
    let r = load_request(&plane, &a, &id)?;
    Ok(Json(request_view(&plane, r, now)).into_response())
}

async fn decide_request(
    State(s): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<String>,
    Body(verdict): Body<Verdict>,
) -> ApiResult<Response> {
    let id = RequestId::new(id);
    let r = s.with(|plane, now| plane.decide(&id, &a, verdict, now))?;
    Ok(Json(r).into_response())
}

async fn execute_request(
    State(s): State<AppState>,
    _: Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let id = RequestId::new(id);
    let now = (s.clock)();
    let mut plane = s.plane.lock().unwrap_or_else(|e| e.into_inner());
    let r = plane.execute(&id, now)?;
    Ok(Json(request_view(&plane, &r, now)).into_response())
}

async fn request_export(
    State(s): State<AppState>,
    Caller(a): Caller,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let id = RequestId::new(id);
    let plane = s.plane.lock().unwrap_or_else(|e| e.into_inner());
    let r = plane.requests().get(&id)?;
    own(&a, &r.pseudonym)?;
    let doc = plane
        .stored_export(&id)
        .ok_or_else(|| ApiError::not_found("UnknownExport"))?;
    Ok(Json(doc).into_response())
}

// ---- audit ----------------------------------------------------------------

#[derive(Deserialize)]
struct AuditQuery {
    #[serde(default)]
    category: Option<Category>,
    #[serde(default)]
    pseudonym: Option<Pseudonym>,
    #[serde(default)]
    correlation_id: Option<String>,
    #[serde(default)]
    from: Option<Timestamp>,
    #[serde(default)]
    to: Option<Timestamp>,
}

async fn query_audit(
    State(s): State<AppState>,
    Caller(a): Caller,
    Params(q): Params<AuditQuery>,
) -> ApiResult<Response> {
    let filter = AuditFilter {
        category: q.category,
        pseudonym: q.pseudonym,
        correlation_id: q.correlation_id,
        from: q.from,
        to: q.to,
    };
    let events = s.with(|plane, _| plane.query_audit(&filter, a.role))?;
    Ok(Json(events).into_response())
}

// ---- services -------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ServiceBody {
    service_id: String,
    data_categories: Vec<PurposeId>,
    region: RegionCode,
    #[serde(default)]
    behavior: Behavior,
}

async fn register_service(
    State(s): State<AppState>,
    _: Caller,
    Body(b): Body<ServiceBody>,
) -> ApiResult<Response> {
    let reg = ServiceRegistration::new(b.service_id, b.data_categories, b.region);
    let reg = s.with(|plane, now| plane.spawn_service(reg, b.behavior, now))?;
    Ok(created(reg))
}

async fn list_services(State(s): State<AppState>, _: Caller) -> ApiResult<Response> {
    let list = s.with(|plane, _| {
        Ok(plane
            .bus()
            .services()
            .map(|r| {
                let behavior = plane
                    .service(&r.service_id)
                    .map(|b| b.behavior())
                    .unwrap_or_default();
                json!({ "registration": r, "behavior": behavior })
            })
            .collect::<Vec<_>>())
    })?;
    Ok(Json(list).into_response())
}

#[derive(Deserialize)]
struct StatusBody {
    status: ServiceStatus,
}

async fn service_status(
    State(s): State<AppState>,
    _: Caller,
    Path(id): Path<String>,
    Body(b): Body<StatusBody>,
) -> ApiResult<Response> {
    let id = ServiceId::new(id);
    s.with(|plane, now| plane.set_service_status(&id, b.status, now))?;
    Ok(Json(json!({ "service": id, "status": b.status })).into_response())
}

#[derive(Deserialize)]
struct BehaviorBody {
    behavior: Behavior,
}

async fn service_behavior(
    State(s): State<AppState>,
    _: Caller,
    Path(id): Path<String>,
    Body(b): Body<BehaviorBody>,
) -> ApiResult<Response> {
    let id = ServiceId::new(id);
    s.with(|plane, now| plane.set_behavior(&id, b.behavior, now))?;
    Ok(Json(json!({ "service": id, "behavior": b.behavior })).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordBody {
    pseudonym: Pseudonym,
    purpose: PurposeId,
    fields: BTreeMap<String, String>,
}

/// Business processing by a registered service, subject to the processing gate.
async fn service_records(
    State(s): State<AppState>,
    _: Caller,
    Path(id): Path<String>,
    Body(b): Body<RecordBody>,
) -> ApiResult<Response> {
    let id = ServiceId::new(id);
    s.with(|plane, now| plane.process(&id, &b.pseudonym, &b.purpose, b.fields, now))?;
    Ok(created(json!({ "service": id, "pseudonym": b.pseudonym })))
}

// ---- transfers and disclosures ---------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferBody {
    pseudonym: Pseudonym,
    target: RegionCode,
    #[serde(default)]
    override_granted: bool,
}

async fn transfer(
    State(s): State<AppState>,
    _: Caller,
    Body(b): Body<TransferBody>,
) -> ApiResult<Response> {
    let d = s.with(|plane, now| {
        plane.authorize_transfer(&b.pseudonym, &b.target, b.override_granted, now)
    })?;
    Ok(Json(d).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DisclosureBody {
    pseudonym: Pseudonym,
    recipient: String,
}

async fn disclosure(
    State(s): State<AppState>,
    _: Caller,
    Body(b): Body<DisclosureBody>,
) -> ApiResult<Response> {
    let e = s.with(|plane, now| plane.record_disclosure(&b.pseudonym, &b.recipient, now))?;
    Ok(created(e))
}

// ---- admin ----------------------------------------------------------------

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RetentionBody {
    #[serde(default)]
    max_age_days: Option<i64>,
}

async fn retention_scan(
    State(s): State<AppState>,
    _: Caller,
    raw: axum::body::Bytes,
) -> ApiResult<Response> {
    // The body is optional.
    let b: RetentionBody = if raw.is_empty() {
        RetentionBody::default()
    } else {
        serde_json::from_slice(&raw).map_err(|e| {
            ApiError::new(StatusCode::BAD_REQUEST, "MalformedPayload", e.to_string())
        })?
    };
    if b.max_age_days.is_some_and(|d| d <= 0) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "MalformedPayload",
            "max_age_days must be positive",
        ));
    }
    let out =
        s.with(|plane, now| plane.retention_scan(now, b.max_age_days.map(chrono::Duration::days)))?;
    Ok(Json(out).into_response())
}

async fn minimization_report(State(s): State<AppState>, _: Caller) -> ApiResult<Response> {
    let report = s.with(|plane, _| Ok(plane.minimization_report()))?;
    Ok(Json(json!({ "clean": report.is_clean(), "report": report })).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StagingBody {
    seed: u64,
}

async fn staging_snapshot(
    State(s): State<AppState>,
    _: Caller,
    Body(b): Body<StagingBody>,
) -> ApiResult<Response> {
    let snap = s.with(|plane, now| plane.generate_staging(b.seed, now))?;
    Ok(created(snap))
}

async fn backup(State(s): State<AppState>, _: Caller) -> ApiResult<Response> {
    let id = s.with(|plane, now| plane.backup(now))?;
    Ok(created(json!({ "snapshot": id })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RestoreBody {
    snapshot: SnapshotId,
}

async fn restore(
    State(s): State<AppState>,
    _: Caller,
    Body(b): Body<RestoreBody>,
) -> ApiResult<Response> {
    s.with(|plane, now| plane.restore(&b.snapshot, now))?;
    Ok(Json(json!({ "restored": b.snapshot })).into_response())
}
