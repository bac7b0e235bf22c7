//! HTTP surface: ingestion endpoints, the NGSI-style broker endpoints,
//! health, and metrics.
//!
//! All shared state sits behind one mutex with short critical sections;
//! notification deliveries leave the lock through a channel and run on
//! their own task, so a slow or dead subscriber can never stall ingestion
//! or context updates.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;

use crowdcal_core::model::{CameraEvent, RawProbeReport};

use crate::broker::{BrokerError, BrokerState, ContextEntity, EntityPattern, NotificationJob};
use crate::ingest::{IngestOutcome, Ingestor};
use crate::pipeline::Pipeline;
use crate::store::Store;

/// Service counters exposed at /metrics. Plain atomics: exactness across
/// concurrent bumps matters more than ordering.
#[derive(Debug, Default)]
pub struct Metrics {
    pub finalized_windows: AtomicU64,
    pub rejected_probes: AtomicU64,
    pub rejected_camera_events: AtomicU64,
    pub late_probes: AtomicU64,
    pub late_camera_events: AtomicU64,
    pub duplicate_records: AtomicU64,
    pub context_updates: AtomicU64,
    pub notifications_sent: AtomicU64,
    pub notification_failures: AtomicU64,
}

impl Metrics {
    pub fn snapshot(&self) -> serde_json::Value {
        json!({
            "finalized_windows": self.finalized_windows.load(Ordering::Relaxed),
            "rejected_probes": self.rejected_probes.load(Ordering::Relaxed),
            "rejected_camera_events": self.rejected_camera_events.load(Ordering::Relaxed),
            "late_probes": self.late_probes.load(Ordering::Relaxed),
            "late_camera_events": self.late_camera_events.load(Ordering::Relaxed),
            "duplicate_records": self.duplicate_records.load(Ordering::Relaxed),
            "context_updates": self.context_updates.load(Ordering::Relaxed),
            "notifications_sent": self.notifications_sent.load(Ordering::Relaxed),
            "notification_failures": self.notification_failures.load(Ordering::Relaxed),
        })
    }
}

/// Mutable service state: storage, broker maps, and the calibration
/// pipeline, advanced together under one lock.
pub struct ServiceInner {
    pub store: Store,
    pub broker: BrokerState,
    pub pipeline: Pipeline,
}

#[derive(Clone)]
pub struct AppState {
    pub inner: Arc<Mutex<ServiceInner>>,
    pub ingestor: Arc<Ingestor>,
    pub metrics: Arc<Metrics>,
    pub notify_tx: mpsc::UnboundedSender<NotificationJob>,
}

impl AppState {
    pub fn new(
        inner: ServiceInner,
        ingestor: Ingestor,
        notify_tx: mpsc::UnboundedSender<NotificationJob>,
    ) -> AppState {
        AppState {
            inner: Arc::new(Mutex::new(inner)),
            ingestor: Arc::new(ingestor),
            metrics: Arc::new(Metrics::default()),
            notify_tx,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ServiceInner> {
        self.inner.lock().expect("service state lock")
    }
}

/// Bounded-retry delivery policy for subscriber notifications.
#[derive(Debug, Clone, Copy)]
pub struct NotifyPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for NotifyPolicy {
    fn default() -> Self {
        NotifyPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

/// Delivers queued notifications: POST of the exact entity document to the
/// subscription's reference URL, with exponential backoff between
/// attempts. Failures are logged and counted, never propagated.
pub async fn run_notifier(
    mut rx: mpsc::UnboundedReceiver<NotificationJob>,
    policy: NotifyPolicy,
    metrics: Arc<Metrics>,
) {
    let client = reqwest::Client::new();
    while let Some(job) = rx.recv().await {
        let mut backoff = policy.initial_backoff;
        let mut delivered = false;
        for attempt in 1..=policy.attempts.max(1) {
            let result = client
                .post(&job.reference_url)
                .header("content-type", "application/json")
                .body(job.body.clone())
                .send()
                .await;
            match result {
                Ok(response) if response.status().is_success() => {
                    delivered = true;
                    break;
                }
                Ok(response) => {
                    tracing::warn!(
                        subscription = %job.subscription_id,
                        status = %response.status(),
                        attempt,
                        "notification rejected"
                    );
                }
                Err(error) => {
                    tracing::warn!(
                        subscription = %job.subscription_id,
                        %error,
                        attempt,
                        "notification failed"
                    );
                }
            }
            if attempt < policy.attempts {
                tokio::time::sleep(backoff).await;
                backoff *= 2;
            }
        }
        if delivered {
            metrics.notifications_sent.fetch_add(1, Ordering::Relaxed);
        } else {
            metrics
                .notification_failures
                .fetch_add(1, Ordering::Relaxed);
            tracing::warn!(
                subscription = %job.subscription_id,
                url = %job.reference_url,
                "notification dropped after retries"
            );
        }
    }
}

fn rejection(reason: &str, detail: String) -> Response {
    (
        StatusCode::BAD_REQUEST,
        Json(json!({ "error": reason, "detail": detail })),
    )
        .into_response()
}

fn accepted(outcome: IngestOutcome) -> Response {
    (
        StatusCode::ACCEPTED,
        Json(json!({ "status": "accepted", "outcome": outcome })),
    )
        .into_response()
}

async fn ingest_probe(
    State(state): State<AppState>,
    Json(report): Json<RawProbeReport>,
) -> Response {
    let result = {
        let mut inner = state.lock();
        state.ingestor.ingest_probe(&mut inner.store, &report)
    };
    match result {
        Ok(outcome) => {
            match outcome {
                IngestOutcome::Late => {
                    state.metrics.late_probes.fetch_add(1, Ordering::Relaxed);
                }
                IngestOutcome::Duplicate => {
                    state
                        .metrics
                        .duplicate_records
                        .fetch_add(1, Ordering::Relaxed);
                }
                IngestOutcome::Stored => {}
            }
            accepted(outcome)
        }
        Err(err) => {
            state
                .metrics
                .rejected_probes
                .fetch_add(1, Ordering::Relaxed);
            rejection(err.reason(), err.to_string())
        }
    }
}

async fn ingest_camera(State(state): State<AppState>, Json(event): Json<CameraEvent>) -> Response {
    let result = {
        let mut inner = state.lock();
        state.ingestor.ingest_camera(&mut inner.store, &event)
    };
    match result {
        Ok(outcome) => {
            match outcome {
                IngestOutcome::Late => {
                    state
                        .metrics
                        .late_camera_events
                        .fetch_add(1, Ordering::Relaxed);
                }
                IngestOutcome::Duplicate => {
                    state
                        .metrics
                        .duplicate_records
                        .fetch_add(1, Ordering::Relaxed);
                }
                IngestOutcome::Stored => {}
            }
            accepted(outcome)
        }
        Err(err) => {
            state
                .metrics
                .rejected_camera_events
                .fetch_add(1, Ordering::Relaxed);
            rejection(err.reason(), err.to_string())
        }
    }
}

fn broker_rejection(err: BrokerError) -> Response {
    let reason = match &err {
        BrokerError::WrongEntityType(_) => "wrong_entity_type",
        BrokerError::WrongAttribute => "wrong_attribute",
        BrokerError::EmptyInterval { .. } => "empty_interval",
        BrokerError::AmbiguousPattern => "ambiguous_pattern",
        BrokerError::BadReference(_) => "bad_reference",
        BrokerError::UnknownSubscription(_) => "unknown_subscription",
    };
    let status = if matches!(err, BrokerError::UnknownSubscription(_)) {
        StatusCode::NOT_FOUND
    } else {
        StatusCode::BAD_REQUEST
    };
    (
        status,
        Json(json!({ "error": reason, "detail": err.to_string() })),
    )
        .into_response()
}

async fn update_context(
    State(state): State<AppState>,
    Json(entity): Json<ContextEntity>,
) -> Response {
    let now = Utc::now();
    let result = {
        let mut inner = state.lock();
        match inner.broker.update(entity.clone(), now) {
            Ok((jobs, expired)) => {
                if let Err(err) = inner.store.append_entity(&entity) {
                    return rejection("storage", err.to_string());
                }
                for id in &expired {
                    if let Err(err) = inner.store.delete_subscription(id) {
                        return rejection("storage", err.to_string());
                    }
                }
                Ok(jobs)
            }
            Err(err) => Err(err),
        }
    };
    match result {
        Ok(jobs) => {
            state
                .metrics
                .context_updates
                .fetch_add(1, Ordering::Relaxed);
            let notified = jobs.len();
            for job in jobs {
                let _ = state.notify_tx.send(job);
            }
            Json(json!({ "status": "ok", "notified": notified })).into_response()
        }
        Err(err) => broker_rejection(err),
    }
}

#[derive(Debug, Deserialize)]
struct QueryRequest {
    #[serde(default)]
    id: Option<String>,
    #[serde(default, rename = "type")]
    entity_type: Option<String>,
}

/// Typed response wrapper so entities keep their wire field order; routing
/// them through `json!` would re-sort every object's keys alphabetically.
#[derive(Debug, Serialize)]
struct QueryResponse {
    entities: Vec<ContextEntity>,
}

async fn query_context(State(state): State<AppState>, Json(query): Json<QueryRequest>) -> Response {
    let inner = state.lock();
    let entities: Vec<ContextEntity> = inner
        .broker
        .query(query.id.as_deref(), query.entity_type.as_deref())
        .into_iter()
        .cloned()
        .collect();
    Json(QueryResponse { entities }).into_response()
}

#[derive(Debug, Deserialize)]
struct SubscribeRequest {
    #[serde(default, rename = "entityId")]
    entity_id: Option<String>,
    #[serde(default, rename = "entityType")]
    entity_type: Option<String>,
    reference: String,
    #[serde(default, with = "optional_timefmt")]
    expires: Option<DateTime<Utc>>,
}

/// Serde adapter for optional timestamps in the broker wire format.
mod optional_timefmt {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D>(deserializer: D) -> Result<Option<DateTime<Utc>>, D::Error>
    where
        D: Deserializer<'de>,
    {
        let raw: Option<String> = Option::deserialize(deserializer)?;
        match raw {
            None => Ok(None),
            Some(s) => crowdcal_core::model::parse_timestamp(&s)
                .map(Some)
                .map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Serialize)]
struct SubscribeResponse {
    #[serde(rename = "subscriptionId")]
    subscription_id: String,
}

async fn subscribe_context(
    State(state): State<AppState>,
    Json(request): Json<SubscribeRequest>,
) -> Response {
    let pattern = match (request.entity_id, request.entity_type) {
        (Some(id), None) => EntityPattern::Id(id),
        (None, Some(t)) => EntityPattern::Type(t),
        _ => return broker_rejection(BrokerError::AmbiguousPattern),
    };
    let mut inner = state.lock();
    match inner
        .broker
        .subscribe(pattern, request.reference, request.expires)
    {
        Ok(sub) => {
            if let Err(err) = inner.store.put_subscription(&sub) {
                return rejection("storage", err.to_string());
            }
            Json(SubscribeResponse {
                subscription_id: sub.subscription_id,
            })
            .into_response()
        }
        Err(err) => broker_rejection(err),
    }
}

#[derive(Debug, Deserialize)]
struct UnsubscribeRequest {
    #[serde(rename = "subscriptionId")]
    subscription_id: String,
}

async fn unsubscribe_context(
    State(state): State<AppState>,
    Json(request): Json<UnsubscribeRequest>,
) -> Response {
    let mut inner = state.lock();
    match inner.broker.unsubscribe(&request.subscription_id) {
        Ok(sub) => {
            if let Err(err) = inner.store.delete_subscription(&sub.subscription_id) {
                return rejection("storage", err.to_string());
            }
            Json(json!({ "status": "ok" })).into_response()
        }
        Err(err) => broker_rejection(err),
    }
}

async fn health() -> Response {
    Json(json!({ "status": "ok" })).into_response()
}

async fn metrics(State(state): State<AppState>) -> Response {
    Json(state.metrics.snapshot()).into_response()
}

/// Builds the full service router.
pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/ingest/probe", post(ingest_probe))
        .route("/ingest/camera", post(ingest_camera))
        .route("/ngsi10/updateContext", post(update_context))
        .route("/ngsi10/queryContext", post(query_context))
        .route("/ngsi10/subscribeContext", post(subscribe_context))
        .route("/ngsi10/unsubscribeContext", post(unsubscribe_context))
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .with_state(state)
}

/// Live finalization loop: polls the clock and finalizes every due window
/// in order, forwarding notification jobs to the delivery task.
pub async fn run_finalizer(state: AppState, grace_s: u32, poll_interval: Duration) {
    loop {
        tokio::time::sleep(poll_interval).await;
        let now = Utc::now();
        loop {
            let jobs = {
                let mut inner = state.lock();
                let index = {
                    let ServiceInner {
                        store, pipeline, ..
                    } = &mut *inner;
                    let index = pipeline.next_index(store);
                    if !pipeline.is_due(index, now, grace_s) {
                        break;
                    }
                    index
                };
                let ServiceInner {
                    store,
                    broker,
                    pipeline,
                } = &mut *inner;
                match pipeline.finalize_window(store, broker, index, now) {
                    Ok(done) => {
                        if let Err(error) = store.flush() {
                            tracing::error!(%error, "store flush failed after finalization");
                        }
                        state
                            .metrics
                            .finalized_windows
                            .fetch_add(1, Ordering::Relaxed);
                        done.notifications
                    }
                    Err(error) => {
                        // Never skip a window: log and retry on the next
                        // poll tick.
                        tracing::error!(window = index, %error, "finalization failed; will retry");
                        break;
                    }
                }
            };
            for job in jobs {
                let _ = state.notify_tx.send(job);
            }
        }
    }
}
