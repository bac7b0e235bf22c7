//! End-to-end tests against a served instance: ingestion endpoints, the
//! broker surface, notification delivery with retries, and the live
//! finalizer loop.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::post;
use axum::Router;
use chrono::{DateTime, Duration as ChronoDuration, Utc};
use serde_json::{json, Value};
use tokio::sync::mpsc;

use crowdcal_core::model::{GeoPoint, Zone, ZoneTopology};
use crowdcal_service::{
    build_service, router, run_finalizer, run_notifier, NotifyPolicy, Service, ServiceConfig,
};

fn topology() -> ZoneTopology {
    ZoneTopology {
        zones: vec![
            Zone {
                zone_id: "A".into(),
                sniffer_id: "sniffer-A".into(),
                sniffer_mac: Some("02:00:00:00:00:01".into()),
                geolocation: GeoPoint {
                    latitude: -41.0,
                    longitude: 174.0,
                },
                is_choke_point: true,
                camera_ids: vec!["C0".into()],
            },
            Zone {
                zone_id: "B".into(),
                sniffer_id: "sniffer-B".into(),
                sniffer_mac: Some("02:00:00:00:00:02".into()),
                geolocation: GeoPoint {
                    latitude: -41.1,
                    longitude: 174.1,
                },
                is_choke_point: false,
                camera_ids: vec![],
            },
        ],
    }
}

fn config(dir: &std::path::Path, origin: DateTime<Utc>) -> ServiceConfig {
    serde_json::from_value(json!({
        "store_dir": dir.join("store"),
        "salt": "30313233343536373839616263646566",
        "window_seconds": 900,
        "origin": crowdcal_core::model::format_timestamp(origin),
        "algorithm": "proportional",
        "q": 1,
        "finalization_grace_seconds": 30,
        "poll_interval_ms": 25,
        "topology": topology(),
    }))
    .unwrap()
}

/// Serves a built service on an ephemeral port; returns its base URL.
async fn serve(service: Service, policy: NotifyPolicy) -> String {
    let Service {
        state, notify_rx, ..
    } = service;
    let metrics = state.metrics.clone();
    tokio::spawn(run_notifier(notify_rx, policy, metrics));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(state)).await.unwrap();
    });
    format!("http://{addr}")
}

fn probe_json(mac: &str, sniffer: &str, at: DateTime<Utc>, seq: u32) -> Value {
    json!({
        "mac": mac,
        "sniffer_id": sniffer,
        "timestamp": crowdcal_core::model::format_timestamp(at),
        "sequence_number": seq,
        "rssi": -55,
    })
}

#[tokio::test]
async fn ingestion_accepts_validates_and_deduplicates() {
    let dir = tempfile::tempdir().unwrap();
    let origin = Utc::now() - ChronoDuration::minutes(5);
    let service = build_service(config(dir.path(), origin), Utc::now()).unwrap();
    let base = serve(service, NotifyPolicy::default()).await;
    let client = reqwest::Client::new();

    let probe = probe_json(
        "AA:BB:CC:DD:EE:FF",
        "sniffer-A",
        origin + ChronoDuration::seconds(10),
        0,
    );
    let response = client
        .post(format!("{base}/ingest/probe"))
        .json(&probe)
        .send()
        .await
        .unwrap();
    assert_eq!(response.status(), 202);
    let body: Value = response.json().await.unwrap();
    assert_eq!(body["outcome"], "stored");

    let dup: Value = client
        .post(format!("{base}/ingest/probe"))
        .json(&probe)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(dup["outcome"], "duplicate");

    let bad = client
        .post(format!("{base}/ingest/probe"))
        .json(&probe_json("AA:BB:CC:DD:EE:FF", "X9", origin, 0))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 400);
    let body: Value = bad.json().await.unwrap();
    assert_eq!(body["error"], "unknown_sniffer");

    let malformed = client
        .post(format!("{base}/ingest/probe"))
        .json(&probe_json("ZZ:BB:CC:DD:EE:FF", "sniffer-A", origin, 0))
        .send()
        .await
        .unwrap();
    assert_eq!(malformed.status(), 400);
    let body: Value = malformed.json().await.unwrap();
    assert_eq!(body["error"], "malformed_mac");

    let camera = client
        .post(format!("{base}/ingest/camera"))
        .json(&json!({
            "camera_id": "C0",
            "direction": "move_in",
            "timestamp": crowdcal_core::model::format_timestamp(origin + ChronoDuration::seconds(20)),
            "count": 2,
        }))
        .send()
        .await
        .unwrap();
    assert_eq!(camera.status(), 202);

    let metrics: Value = client
        .get(format!("{base}/metrics"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(metrics["rejected_probes"], 2);
    assert_eq!(metrics["duplicate_records"], 1);

    let health: Value = client
        .get(format!("{base}/health"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(health["status"], "ok");
}

fn entity_json(id: &str, value: u64, start: DateTime<Utc>) -> Value {
    json!({
        "id": id,
        "type": "nle:WiFiSniffer",
        "domainMetadata": {
            "MacAddress": "02:00:00:00:00:01",
            "nle:SimpleGeolocation": { "latitude": -41.0, "longitude": 174.0 }
        },
        "nle:CrowdEstimation": {
            "name": "CrowdEstimation",
            "type": "nle:CrowdEstimation",
            "contextValue": value,
            "metadata": {
                "StartTime": crowdcal_core::model::format_timestamp(start),
                "EndTime": crowdcal_core::model::format_timestamp(start + ChronoDuration::seconds(900)),
                "calibratedValue": value as f64,
                "fallback": false
            }
        }
    })
}

#[tokio::test]
async fn broker_round_trip_subscribe_notify_unsubscribe() {
    let dir = tempfile::tempdir().unwrap();
    let origin = Utc::now() - ChronoDuration::minutes(5);
    let service = build_service(config(dir.path(), origin), Utc::now()).unwrap();
    let base = serve(
        service,
        NotifyPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(25),
        },
    )
    .await;
    let client = reqwest::Client::new();

    // Capture server for notifications.
    let (seen_tx, mut seen_rx) = mpsc::unbounded_channel::<String>();
    let capture = Router::new().route(
        "/inbox",
        post(move |body: String| {
            let seen_tx = seen_tx.clone();
            async move {
                seen_tx.send(body).unwrap();
                "ok"
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let capture_addr: SocketAddr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, capture).await.unwrap();
    });

    let sub: Value = client
        .post(format!("{base}/ngsi10/subscribeContext"))
        .json(&json!({
            "entityType": "nle:WiFiSniffer",
            "reference": format!("http://{capture_addr}/inbox"),
        }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let sub_id = sub["subscriptionId"].as_str().unwrap().to_string();
    assert!(sub_id.starts_with("sub-"));

    let doc = entity_json("sniffer-A", 212, origin);
    let update = client
        .post(format!("{base}/ngsi10/updateContext"))
        .json(&doc)
        .send()
        .await
        .unwrap();
    assert_eq!(update.status(), 200);
    let ack: Value = update.json().await.unwrap();
    assert_eq!(ack["notified"], 1);

    // Read-your-write, byte-exact: the response must carry the entity in
    // its wire field order, not a re-sorted copy.
    let query_body = client
        .post(format!("{base}/ngsi10/queryContext"))
        .json(&json!({ "id": "sniffer-A" }))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let entity: crowdcal_service::ContextEntity = serde_json::from_value(doc.clone()).unwrap();
    let canonical = serde_json::to_string(&entity).unwrap();
    assert_eq!(query_body, format!("{{\"entities\":[{canonical}]}}"));
    let queried: Value = serde_json::from_str(&query_body).unwrap();
    assert_eq!(
        queried["entities"][0]["nle:CrowdEstimation"]["contextValue"],
        212
    );

    // Notification body is the exact entity document.
    let delivered = tokio::time::timeout(Duration::from_secs(5), seen_rx.recv())
        .await
        .unwrap()
        .unwrap();
    let expected: Value = serde_json::from_str(&delivered).unwrap();
    assert_eq!(expected, doc);

    // Rejections: wrong shape and empty window.
    let mut empty = entity_json("sniffer-A", 1, origin);
    empty["nle:CrowdEstimation"]["metadata"]["EndTime"] =
        empty["nle:CrowdEstimation"]["metadata"]["StartTime"].clone();
    let bad = client
        .post(format!("{base}/ngsi10/updateContext"))
        .json(&empty)
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 400);

    // Unsubscribe stops further notifications.
    let gone = client
        .post(format!("{base}/ngsi10/unsubscribeContext"))
        .json(&json!({ "subscriptionId": sub_id }))
        .send()
        .await
        .unwrap();
    assert_eq!(gone.status(), 200);
    client
        .post(format!("{base}/ngsi10/updateContext"))
        .json(&entity_json(
            "sniffer-A",
            300,
            origin + ChronoDuration::seconds(900),
        ))
        .send()
        .await
        .unwrap();
    assert!(
        tokio::time::timeout(Duration::from_millis(400), seen_rx.recv())
            .await
            .is_err(),
        "no notification expected after unsubscribe"
    );

    let missing = client
        .post(format!("{base}/ngsi10/unsubscribeContext"))
        .json(&json!({ "subscriptionId": "sub-999" }))
        .send()
        .await
        .unwrap();
    assert_eq!(missing.status(), 404);
}

#[tokio::test]
async fn notifications_retry_until_the_subscriber_recovers() {
    let dir = tempfile::tempdir().unwrap();
    let origin = Utc::now() - ChronoDuration::minutes(5);
    let service = build_service(config(dir.path(), origin), Utc::now()).unwrap();
    let base = serve(
        service,
        NotifyPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(30),
        },
    )
    .await;
    let client = reqwest::Client::new();

    // Flaky subscriber: refuses the first two deliveries.
    let hits = Arc::new(AtomicU32::new(0));
    let (seen_tx, mut seen_rx) = mpsc::unbounded_channel::<String>();
    let flaky = Router::new()
        .route(
            "/inbox",
            post(move |State(hits): State<Arc<AtomicU32>>, body: String| {
                let seen_tx = seen_tx.clone();
                async move {
                    if hits.fetch_add(1, Ordering::SeqCst) < 2 {
                        axum::http::StatusCode::SERVICE_UNAVAILABLE
                    } else {
                        seen_tx.send(body).unwrap();
                        axum::http::StatusCode::OK
                    }
                }
            }),
        )
        .with_state(hits.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, flaky).await.unwrap();
    });

    client
        .post(format!("{base}/ngsi10/subscribeContext"))
        .json(&json!({
            "entityId": "sniffer-A",
            "reference": format!("http://{addr}/inbox"),
        }))
        .send()
        .await
        .unwrap();

    let doc = entity_json("sniffer-A", 42, origin);
    let update = client
        .post(format!("{base}/ngsi10/updateContext"))
        .json(&doc)
        .send()
        .await
        .unwrap();
    // The update path acknowledges immediately; delivery happens behind it.
    assert_eq!(update.status(), 200);

    let delivered = tokio::time::timeout(Duration::from_secs(5), seen_rx.recv())
        .await
        .expect("notification should arrive within the retry budget")
        .unwrap();
    assert_eq!(serde_json::from_str::<Value>(&delivered).unwrap(), doc);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn live_finalizer_publishes_past_windows() {
    let dir = tempfile::tempdir().unwrap();
    // Origin 35 minutes back: windows 0 and 1 have ended and cleared the
    // 30 s grace; window 2 is still open.
    let origin = Utc::now() - ChronoDuration::minutes(35);
    let service_config = config(dir.path(), origin);
    let service = build_service(service_config, Utc::now()).unwrap();
    let state = service.state.clone();
    let base = serve(service, NotifyPolicy::default()).await;
    let client = reqwest::Client::new();

    for (i, mac) in ["AA:00:00:00:00:01", "AA:00:00:00:00:02"]
        .iter()
        .enumerate()
    {
        client
            .post(format!("{base}/ingest/probe"))
            .json(&probe_json(
                mac,
                "sniffer-A",
                origin + ChronoDuration::seconds(60 + i as i64),
                0,
            ))
            .send()
            .await
            .unwrap();
    }
    client
        .post(format!("{base}/ingest/probe"))
        .json(&probe_json(
            "AA:00:00:00:00:03",
            "sniffer-B",
            origin + ChronoDuration::seconds(90),
            0,
        ))
        .send()
        .await
        .unwrap();
    client
        .post(format!("{base}/ingest/camera"))
        .json(&json!({
            "camera_id": "C0",
            "direction": "move_out",
            "timestamp": crowdcal_core::model::format_timestamp(origin + ChronoDuration::seconds(70)),
            "count": 4,
        }))
        .send()
        .await
        .unwrap();

    tokio::spawn(run_finalizer(state, 30, Duration::from_millis(25)));

    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    loop {
        let metrics: Value = client
            .get(format!("{base}/metrics"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        if metrics["finalized_windows"].as_u64().unwrap() >= 2 {
            break;
        }
        assert!(
            tokio::time::Instant::now() < deadline,
            "finalizer did not advance: {metrics}"
        );
        tokio::time::sleep(Duration::from_millis(50)).await;
    }

    // Window 0: choke d0=2, y0=4, a=2.0; zone B raw 1 calibrated 2.
    let queried: Value = client
        .post(format!("{base}/ngsi10/queryContext"))
        .json(&json!({ "type": "nle:WiFiSniffer" }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let entities = queried["entities"].as_array().unwrap();
    assert_eq!(entities.len(), 2);
    let b = entities
        .iter()
        .find(|e| e["id"] == "sniffer-B")
        .expect("zone B published");
    // Latest window (1) is empty, so B's latest estimate is 0 with the
    // window-0 coefficient retained.
    assert_eq!(b["nle:CrowdEstimation"]["contextValue"], 0);
    let a = entities
        .iter()
        .find(|e| e["id"] == "sniffer-A")
        .expect("choke published");
    assert_eq!(a["nle:CrowdEstimation"]["metadata"]["fallback"], false);
}

#[tokio::test]
async fn hundred_concurrent_updates_all_read_their_writes() {
    let dir = tempfile::tempdir().unwrap();
    let origin = Utc::now() - ChronoDuration::minutes(5);
    let service = build_service(config(dir.path(), origin), Utc::now()).unwrap();
    let base = serve(service, NotifyPolicy::default()).await;

    let mut handles = Vec::new();
    for i in 0..100u64 {
        let base = base.clone();
        let doc = entity_json(&format!("sniffer-{i:03}"), 1000 + i, origin);
        handles.push(tokio::spawn(async move {
            let client = reqwest::Client::new();
            let update = client
                .post(format!("{base}/ngsi10/updateContext"))
                .json(&doc)
                .send()
                .await
                .unwrap();
            assert_eq!(update.status(), 200);
            let queried: Value = client
                .post(format!("{base}/ngsi10/queryContext"))
                .json(&json!({ "id": format!("sniffer-{i:03}") }))
                .send()
                .await
                .unwrap()
                .json()
                .await
                .unwrap();
            assert_eq!(
                queried["entities"][0]["nle:CrowdEstimation"]["contextValue"],
                1000 + i
            );
        }));
    }
    for handle in handles {
        handle.await.unwrap();
    }
}
