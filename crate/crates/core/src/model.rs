//! Shared domain types: anonymized probe records, camera tally events,
//! tumbling time windows and the zone topology that maps sensors to zones.
//!
//! Invariants that the rest of the system relies on are enforced at
//! construction time here, so downstream code can consume these types
//! without re-validating them.

use std::collections::{HashMap, HashSet};
use std::fmt;

use chrono::{DateTime, Duration, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of a [`DeviceId`] in hexadecimal characters (a SHA-256 digest).
pub const DEVICE_ID_LEN: usize = 64;

/// Legacy timestamp layout accepted on input: `YYYY.MM.DD hh:mm:ss:SSS Z`.
/// Always denotes UTC.
const LEGACY_TIMESTAMP_FORMAT: &str = "%Y.%m.%d %H:%M:%S:%3f Z";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("device id must be {DEVICE_ID_LEN} lowercase hex characters, got {0:?}")]
    InvalidDeviceId(String),
    #[error("unparseable timestamp {0:?}")]
    InvalidTimestamp(String),
    #[error("timestamp {timestamp} precedes the window epoch origin {origin}")]
    TimestampBeforeOrigin {
        timestamp: DateTime<Utc>,
        origin: DateTime<Utc>,
    },
    #[error("window duration must be a positive number of seconds")]
    ZeroWindowDuration,
    #[error("camera event count must be at least 1")]
    ZeroCameraCount,
}

/// Formats a timestamp the way every persisted artifact and API payload
/// emits it: ISO 8601 with millisecond precision and an explicit UTC offset,
/// e.g. `2021-06-07T14:03:07.123+00:00`.
pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, false)
}

/// Parses a timestamp from either the ISO 8601 form produced by
/// [`format_timestamp`] (any RFC 3339 offset is accepted and normalized to
/// UTC) or the legacy dotted layout `2021.06.07 14:03:07:123 Z`.
pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, ModelError> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    if let Ok(naive) = NaiveDateTime::parse_from_str(s, LEGACY_TIMESTAMP_FORMAT) {
        return Ok(naive.and_utc());
    }
    Err(ModelError::InvalidTimestamp(s.to_string()))
}

/// Serde adapter applying [`format_timestamp`] / [`parse_timestamp`] to a
/// `DateTime<Utc>` field.
pub mod timefmt {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&format_timestamp(*t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(de)?;
        parse_timestamp(&s).map_err(serde::de::Error::custom)
    }
}

/// Pseudonymous device identifier: the lowercase hex encoding of a salted
/// SHA-256 digest. Never a raw hardware address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DeviceId(String);

impl DeviceId {
    pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
        let value = value.into();
        let ok = value.len() == DEVICE_ID_LEN
            && value
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if ok {
            Ok(DeviceId(value))
        } else {
            Err(ModelError::InvalidDeviceId(value))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for DeviceId {
    type Error = ModelError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        DeviceId::new(value)
    }
}

impl From<DeviceId> for String {
    fn from(id: DeviceId) -> String {
        id.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A single anonymized probe request observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub device: DeviceId,
    pub sniffer_id: String,
    #[serde(with = "timefmt")]
    pub timestamp: DateTime<Utc>,
    pub sequence_number: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rssi: Option<i32>,
}

/// A probe report as submitted by a sniffer, before anonymization. This is
/// the only type in the system that carries a raw MAC address; it must never
/// be persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawProbeReport {
    pub mac: String,
    pub sniffer_id: String,
    #[serde(with = "timefmt")]
    pub timestamp: DateTime<Utc>,
    pub sequence_number: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rssi: Option<i32>,
}

/// Crossing direction reported by a people-counting camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    MoveIn,
    MoveOut,
}

fn default_camera_count() -> u32 {
    1
}

/// A directional people count reported by a camera at the choke point.
/// `count` is the number of people observed in that direction at that
/// instant; it defaults to 1 and must be at least 1, with larger values
/// supporting batched reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEvent {
    pub camera_id: String,
    pub direction: Direction,
    #[serde(with = "timefmt")]
    pub timestamp: DateTime<Utc>,
    #[serde(default = "default_camera_count")]
    pub count: u32,
}

impl CameraEvent {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.count == 0 {
            return Err(ModelError::ZeroCameraCount);
        }
        Ok(())
    }
}

/// A tumbling window `[start, start + duration_s)`. Windows tile the time
/// axis from a configured epoch origin with no gaps and no overlap; `index`
/// is the zero-based position of this window in that tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub index: u64,
    #[serde(with = "timefmt")]
    pub start: DateTime<Utc>,
    pub duration_s: u32,
}

impl TimeWindow {
    /// Window at a given index of the tiling that starts at `origin`.
    pub fn from_index(
        index: u64,
        duration_s: u32,
        origin: DateTime<Utc>,
    ) -> Result<Self, ModelError> {
        if duration_s == 0 {
            return Err(ModelError::ZeroWindowDuration);
        }
        let start = origin + Duration::seconds(index as i64 * duration_s as i64);
        Ok(TimeWindow {
            index,
            start,
            duration_s,
        })
    }

    /// Exclusive end of the window.
    pub fn end(&self) -> DateTime<Utc> {
        self.start + Duration::seconds(self.duration_s as i64)
    }

    /// Half-open containment check: the start instant belongs to the window,
    /// the end instant belongs to the next one.
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        t >= self.start && t < self.end()
    }
}

/// Maps a timestamp to the tumbling window that contains it.
///
/// Timestamps earlier than `origin` are rejected rather than mapped to a
/// negative index.
pub fn window_for(
    timestamp: DateTime<Utc>,
    duration_s: u32,
    origin: DateTime<Utc>,
) -> Result<TimeWindow, ModelError> {
    if duration_s == 0 {
        return Err(ModelError::ZeroWindowDuration);
    }
    if timestamp < origin {
        return Err(ModelError::TimestampBeforeOrigin { timestamp, origin });
    }
    let elapsed_ms = (timestamp - origin).num_milliseconds();
    let index = (elapsed_ms / (duration_s as i64 * 1000)) as u64;
    TimeWindow::from_index(index, duration_s, origin)
}

/// WGS84 coordinates of a sensor installation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub latitude: f64,
    pub longitude: f64,
}

/// One monitored zone: a sniffer, its position, and (only at the choke
/// point) the people-counting cameras whose tallies calibrate the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub zone_id: String,
    pub sniffer_id: String,
    /// Hardware address of the sniffer itself, published as broker entity
    /// metadata. Unrelated to the addresses of observed devices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sniffer_mac: Option<String>,
    pub geolocation: GeoPoint,
    #[serde(default)]
    pub is_choke_point: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub camera_ids: Vec<String>,
}

/// The deployment layout: every monitored zone, exactly one of which is the
/// camera-equipped choke point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneTopology {
    pub zones: Vec<Zone>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyViolation {
    #[error("no zone is marked as the choke point")]
    NoChokePoint,
    #[error("multiple zones are marked as choke points: {}", .0.join(", "))]
    MultipleChokePoints(Vec<String>),
    #[error("choke point zone {0} has no cameras")]
    ChokePointWithoutCamera(String),
    #[error("zone {0} is not the choke point but lists cameras")]
    CameraOutsideChokePoint(String),
    #[error("duplicate zone id {0}")]
    DuplicateZoneId(String),
    #[error("duplicate sniffer id {0}")]
    DuplicateSnifferId(String),
    #[error("duplicate camera id {0}")]
    DuplicateCameraId(String),
}

/// All violations found in a topology, never just the first.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct TopologyErrors(pub Vec<TopologyViolation>);

impl fmt::Display for TopologyErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid zone topology: ")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// A topology that passed [`validate_topology`], with sensor-to-zone lookup
/// tables built once.
#[derive(Debug, Clone)]
pub struct ValidatedTopology {
    topology: ZoneTopology,
    choke_zone_id: String,
    sniffer_to_zone: HashMap<String, usize>,
    camera_to_zone: HashMap<String, usize>,
}

impl ValidatedTopology {
    pub fn zones(&self) -> &[Zone] {
        &self.topology.zones
    }

    pub fn topology(&self) -> &ZoneTopology {
        &self.topology
    }

    pub fn choke_zone(&self) -> &Zone {
        self.zone(&self.choke_zone_id)
            .expect("choke zone id indexed at validation")
    }

    pub fn zone(&self, zone_id: &str) -> Option<&Zone> {
        self.topology.zones.iter().find(|z| z.zone_id == zone_id)
    }

    pub fn zone_of_sniffer(&self, sniffer_id: &str) -> Option<&Zone> {
        self.sniffer_to_zone
            .get(sniffer_id)
            .map(|&i| &self.topology.zones[i])
    }

    pub fn zone_of_camera(&self, camera_id: &str) -> Option<&Zone> {
        self.camera_to_zone
            .get(camera_id)
            .map(|&i| &self.topology.zones[i])
    }
}

impl Serialize for ValidatedTopology {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        self.topology.serialize(ser)
    }
}

/// Checks every structural invariant of a topology and returns either a
/// lookup-ready wrapper or the complete list of violations.
///
/// Invariants: exactly one choke point zone; the choke point has at least
/// one camera and no other zone has any; zone ids, sniffer ids and camera
/// ids are each unique.
pub fn validate_topology(topology: ZoneTopology) -> Result<ValidatedTopology, TopologyErrors> {
    let mut violations = Vec::new();

    let choke_ids: Vec<String> = topology
        .zones
        .iter()
        .filter(|z| z.is_choke_point)
        .map(|z| z.zone_id.clone())
        .collect();
    match choke_ids.len() {
        0 => violations.push(TopologyViolation::NoChokePoint),
        1 => {}
        _ => violations.push(TopologyViolation::MultipleChokePoints(choke_ids.clone())),
    }

    let mut zone_ids = HashSet::new();
    let mut sniffer_to_zone = HashMap::new();
    let mut camera_to_zone = HashMap::new();
    for (i, zone) in topology.zones.iter().enumerate() {
        if !zone_ids.insert(zone.zone_id.clone()) {
            violations.push(TopologyViolation::DuplicateZoneId(zone.zone_id.clone()));
        }
        if sniffer_to_zone.insert(zone.sniffer_id.clone(), i).is_some() {
            violations.push(TopologyViolation::DuplicateSnifferId(
                zone.sniffer_id.clone(),
            ));
        }
        if zone.is_choke_point && zone.camera_ids.is_empty() {
            violations.push(TopologyViolation::ChokePointWithoutCamera(
                zone.zone_id.clone(),
            ));
        }
        if !zone.is_choke_point && !zone.camera_ids.is_empty() {
            violations.push(TopologyViolation::CameraOutsideChokePoint(
                zone.zone_id.clone(),
            ));
        }
        for camera_id in &zone.camera_ids {
            if camera_to_zone.insert(camera_id.clone(), i).is_some() {
                violations.push(TopologyViolation::DuplicateCameraId(camera_id.clone()));
            }
        }
    }

    if !violations.is_empty() {
        return Err(TopologyErrors(violations));
    }
    Ok(ValidatedTopology {
        choke_zone_id: choke_ids[0].clone(),
        topology,
        sniffer_to_zone,
        camera_to_zone,
    })
}

/// Per-zone observation for one finalized window. `camera_total` is present
/// exactly when the zone is the choke point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMeasurement {
    pub window: TimeWindow,
    pub zone_id: String,
    pub device_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_total: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn origin() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 6, 7, 0, 0, 0).unwrap()
    }

    /// Independent check: walk windows from the origin until one contains
    /// the timestamp.
    fn window_index_by_scan(t: DateTime<Utc>, duration_s: u32, origin: DateTime<Utc>) -> u64 {
        let mut index = 0u64;
        loop {
            let w = TimeWindow::from_index(index, duration_s, origin).unwrap();
            if w.contains(t) {
                return index;
            }
            index += 1;
        }
    }

    #[test]
    fn window_for_maps_into_fifth_window() {
        let t = origin() + Duration::seconds(3723);
        let w = window_for(t, 900, origin()).unwrap();
        assert_eq!(w.index, 4);
        assert_eq!(w.start, origin() + Duration::seconds(3600));
        assert_eq!(w.end(), origin() + Duration::seconds(4500));
        assert_eq!(w.index, window_index_by_scan(t, 900, origin()));
    }

    #[test]
    fn window_boundaries_are_half_open() {
        let w0 = window_for(origin(), 900, origin()).unwrap();
        assert_eq!(w0.index, 0);
        assert!(w0.contains(origin()));
        assert!(!w0.contains(w0.end()));

        let boundary = origin() + Duration::seconds(900);
        let w1 = window_for(boundary, 900, origin()).unwrap();
        assert_eq!(w1.index, 1);

        let just_before = boundary - Duration::milliseconds(1);
        assert_eq!(window_for(just_before, 900, origin()).unwrap().index, 0);
    }

    #[test]
    fn window_for_agrees_with_linear_scan() {
        for offset_ms in [0i64, 1, 899_999, 900_000, 1_234_567, 86_399_999] {
            let t = origin() + Duration::milliseconds(offset_ms);
            let w = window_for(t, 900, origin()).unwrap();
            assert_eq!(
                w.index,
                window_index_by_scan(t, 900, origin()),
                "offset {offset_ms}"
            );
        }
    }

    #[test]
    fn window_for_rejects_pre_origin_and_zero_duration() {
        let early = origin() - Duration::milliseconds(1);
        assert!(matches!(
            window_for(early, 900, origin()),
            Err(ModelError::TimestampBeforeOrigin { .. })
        ));
        assert!(matches!(
            window_for(origin(), 0, origin()),
            Err(ModelError::ZeroWindowDuration)
        ));
    }

    #[test]
    fn timestamp_format_is_iso_millis_with_explicit_offset() {
        let t = Utc.with_ymd_and_hms(2021, 6, 7, 14, 3, 7).unwrap() + Duration::milliseconds(123);
        assert_eq!(format_timestamp(t), "2021-06-07T14:03:07.123+00:00");
        assert_eq!(parse_timestamp("2021-06-07T14:03:07.123+00:00").unwrap(), t);
    }

    #[test]
    fn legacy_timestamp_layout_is_accepted_on_input() {
        let t = parse_timestamp("2021.06.07 14:03:07:123 Z").unwrap();
        assert_eq!(format_timestamp(t), "2021-06-07T14:03:07.123+00:00");
    }

    #[test]
    fn non_utc_offsets_are_normalized() {
        let t = parse_timestamp("2021-06-07T16:03:07.123+02:00").unwrap();
        assert_eq!(format_timestamp(t), "2021-06-07T14:03:07.123+00:00");
    }

    #[test]
    fn garbage_timestamps_are_rejected() {
        assert!(parse_timestamp("last tuesday").is_err());
        assert!(parse_timestamp("2021-06-07").is_err());
    }

    #[test]
    fn device_id_requires_64_lowercase_hex() {
        let ok = "a".repeat(64);
        assert!(DeviceId::new(ok).is_ok());
        assert!(DeviceId::new("a".repeat(63)).is_err());
        assert!(DeviceId::new("A".repeat(64)).is_err());
        assert!(DeviceId::new("g".repeat(64)).is_err());
    }

    #[test]
    fn camera_event_count_must_be_positive() {
        let event = CameraEvent {
            camera_id: "C103".into(),
            direction: Direction::MoveIn,
            timestamp: origin(),
            count: 0,
        };
        assert!(matches!(event.validate(), Err(ModelError::ZeroCameraCount)));
    }

    fn zone(id: &str, sniffer: &str, choke: bool, cameras: &[&str]) -> Zone {
        Zone {
            zone_id: id.into(),
            sniffer_id: sniffer.into(),
            sniffer_mac: None,
            geolocation: GeoPoint {
                latitude: 40.4,
                longitude: -3.7,
            },
            is_choke_point: choke,
            camera_ids: cameras.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn valid_topology_builds_lookup_tables() {
        let topo = ZoneTopology {
            zones: vec![
                zone("M1", "sniffer-1", true, &["C103", "C104"]),
                zone("M2", "sniffer-2", false, &[]),
            ],
        };
        let validated = validate_topology(topo).unwrap();
        assert_eq!(validated.choke_zone().zone_id, "M1");
        assert_eq!(
            validated.zone_of_sniffer("sniffer-2").unwrap().zone_id,
            "M2"
        );
        assert_eq!(validated.zone_of_camera("C104").unwrap().zone_id, "M1");
        assert!(validated.zone_of_sniffer("sniffer-9").is_none());
    }

    #[test]
    fn all_topology_violations_are_reported_together() {
        let topo = ZoneTopology {
            zones: vec![
                zone("M1", "s1", true, &[]),
                zone("M1", "s1", false, &["C1"]),
            ],
        };
        let errs = validate_topology(topo).unwrap_err().0;
        assert!(errs.contains(&TopologyViolation::ChokePointWithoutCamera("M1".into())));
        assert!(errs.contains(&TopologyViolation::DuplicateZoneId("M1".into())));
        assert!(errs.contains(&TopologyViolation::DuplicateSnifferId("s1".into())));
        assert!(errs.contains(&TopologyViolation::CameraOutsideChokePoint("M1".into())));
        assert_eq!(errs.len(), 4);
    }

    #[test]
    fn missing_and_multiple_choke_points_are_violations() {
        let none = ZoneTopology {
            zones: vec![zone("A", "s1", false, &[])],
        };
        assert!(validate_topology(none)
            .unwrap_err()
            .0
            .contains(&TopologyViolation::NoChokePoint));

        let two = ZoneTopology {
            zones: vec![
                zone("A", "s1", true, &["C1"]),
                zone("B", "s2", true, &["C2"]),
            ],
        };
        assert!(matches!(
            validate_topology(two).unwrap_err().0.as_slice(),
            [TopologyViolation::MultipleChokePoints(ids)] if ids == &vec!["A".to_string(), "B".to_string()]
        ));
    }

    #[test]
    fn topology_config_uses_documented_field_names() {
        let json = r#"{
            "zones": [
                {
                    "zone_id": "Z1",
                    "sniffer_id": "sniffer-1",
                    "geolocation": {"latitude": -43.53, "longitude": 172.64},
                    "is_choke_point": true,
                    "camera_ids": ["C0"]
                },
                {
                    "zone_id": "Z2",
                    "sniffer_id": "sniffer-2",
                    "geolocation": {"latitude": -43.54, "longitude": 172.65}
                }
            ]
        }"#;
        let topo: ZoneTopology = serde_json::from_str(json).unwrap();
        let validated = validate_topology(topo.clone()).unwrap();
        assert_eq!(validated.choke_zone().zone_id, "Z1");
        assert!(!topo.zones[1].is_choke_point);

        let out = serde_json::to_string(&topo).unwrap();
        assert!(out.contains("\"geolocation\""));
        assert!(out.contains("\"is_choke_point\""));
    }

    #[test]
    fn camera_event_count_defaults_to_one() {
        let json = r#"{"camera_id":"C0","direction":"move_in","timestamp":"2021-06-07T00:00:01.000+00:00"}"#;
        let event: CameraEvent = serde_json::from_str(json).unwrap();
        assert_eq!(event.count, 1);
        assert!(event.validate().is_ok());
    }

    #[test]
    fn probe_record_json_round_trip() {
        let record = ProbeRecord {
            device: DeviceId::new("0f".repeat(32)).unwrap(),
            sniffer_id: "sniffer-1".into(),
            timestamp: origin() + Duration::milliseconds(1500),
            sequence_number: 42,
            rssi: Some(-63),
        };
        let json = serde_json::to_string(&record).unwrap();
        assert!(json.contains("2021-06-07T00:00:01.500+00:00"));
        let back: ProbeRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, record);
    }
}
