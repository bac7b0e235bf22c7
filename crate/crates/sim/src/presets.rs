//! Ready-made scenarios with distinct traffic character.
//!
//! `railway_station` is commuter traffic: sharp morning and evening peaks,
//! quiet weekends, people moving too fast for most devices to probe while
//! in range. `restart_mall` is browsing traffic: a broad midday plateau,
//! slightly busier weekends, long dwells and heavy edge traffic that never
//! crosses the counting line. The two stress opposite failure modes of
//! device counting, so calibration has something real to correct in each.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};

use crowdcal_core::model::{GeoPoint, Zone, ZoneTopology};

use crate::config::{ScenarioConfig, TransitSpeed, ZoneArrivalProfile};

/// Named scenario selector, e.g. for a CLI flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    RailwayStation,
    RestartMall,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::RailwayStation, Preset::RestartMall];

    pub fn name(self) -> &'static str {
        match self {
            Preset::RailwayStation => "railway_station",
            Preset::RestartMall => "restart_mall",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown preset {0:?}; expected railway_station or restart_mall")]
pub struct UnknownPreset(String);

impl FromStr for Preset {
    type Err = UnknownPreset;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "railway_station" => Ok(Preset::RailwayStation),
            "restart_mall" => Ok(Preset::RestartMall),
            other => Err(UnknownPreset(other.to_string())),
        }
    }
}

fn origin() -> DateTime<Utc> {
    // A Monday, so day-of-week effects line up with the start of the run.
    DateTime::parse_from_rfc3339("2021-06-07T00:00:00.000+00:00")
        .expect("static timestamp")
        .with_timezone(&Utc)
}

/// Builds the full scenario configuration for a preset with default length
/// (7 days) and seed. Callers may adjust fields afterwards; validation
/// happens when the simulation runs.
pub fn preset(which: Preset) -> ScenarioConfig {
    match which {
        Preset::RailwayStation => railway_station(),
        Preset::RestartMall => restart_mall(),
    }
}

fn railway_station() -> ScenarioConfig {
    // Hourly arrival means at the main concourse, weekday shape: near-dead
    // nights, a dominant 07:00-09:00 peak, a secondary evening peak.
    const CONCOURSE: [f64; 24] = [
        3.0, 3.0, 3.0, 3.0, 3.0, 20.0, 120.0, 320.0, 400.0, 180.0, 80.0, 80.0, 110.0, 90.0, 85.0,
        120.0, 260.0, 340.0, 160.0, 70.0, 50.0, 35.0, 20.0, 8.0,
    ];
    let platform: [f64; 24] = CONCOURSE.map(|v| v * 0.85);

    let topology = ZoneTopology {
        zones: vec![
            Zone {
                zone_id: "M1".into(),
                sniffer_id: "sniffer-M1".into(),
                sniffer_mac: Some("02:00:A1:00:00:01".into()),
                geolocation: GeoPoint {
                    latitude: -41.2789,
                    longitude: 174.7805,
                },
                is_choke_point: true,
                camera_ids: vec!["C103".into(), "C104".into(), "C105".into(), "C106".into()],
            },
            Zone {
                zone_id: "M2".into(),
                sniffer_id: "sniffer-M2".into(),
                sniffer_mac: Some("02:00:A1:00:00:02".into()),
                geolocation: GeoPoint {
                    latitude: -41.2793,
                    longitude: 174.7811,
                },
                is_choke_point: false,
                camera_ids: vec![],
            },
        ],
    };

    ScenarioConfig {
        seed: 42,
        origin: origin(),
        duration_hours: 7 * 24,
        window_seconds: 900,
        topology,
        arrival_profiles: vec![
            ZoneArrivalProfile {
                zone_id: "M1".into(),
                hourly_mean: CONCOURSE,
            },
            ZoneArrivalProfile {
                zone_id: "M2".into(),
                hourly_mean: platform,
            },
        ],
        weekend_factor: 0.25,
        probe_interval: Default::default(),
        device_carry_rate: 0.75,
        passerby_rate: 15.0,
        transit_speed: TransitSpeed::Commute,
        camera_accuracy: 0.85,
        camera_false_rate: 0.5,
        regime_shift: None,
    }
}

fn restart_mall() -> ScenarioConfig {
    // Broad retail-hours plateau at the main entrance; other zones are
    // proportionally thinner copies of the same daily shape.
    const ENTRANCE: [f64; 24] = [
        2.0, 1.0, 1.0, 1.0, 2.0, 5.0, 15.0, 40.0, 70.0, 90.0, 110.0, 130.0, 150.0, 140.0, 130.0,
        120.0, 110.0, 90.0, 70.0, 50.0, 30.0, 15.0, 8.0, 4.0,
    ];
    let zone_scale = [0.9, 1.0, 0.85, 0.8, 0.9];

    let places = [
        (
            "S1",
            "sniffer-S1",
            "02:00:B2:00:00:01",
            -43.5320,
            172.6362,
            false,
        ),
        (
            "S2",
            "sniffer-S2",
            "02:00:B2:00:00:02",
            -43.5322,
            172.6366,
            true,
        ),
        (
            "S3",
            "sniffer-S3",
            "02:00:B2:00:00:03",
            -43.5324,
            172.6370,
            false,
        ),
        (
            "S4",
            "sniffer-S4",
            "02:00:B2:00:00:04",
            -43.5326,
            172.6374,
            false,
        ),
        (
            "S5",
            "sniffer-S5",
            "02:00:B2:00:00:05",
            -43.5328,
            172.6378,
            false,
        ),
    ];

    let zones = places
        .iter()
        .map(|(zone_id, sniffer_id, mac, lat, lon, choke)| Zone {
            zone_id: zone_id.to_string(),
            sniffer_id: sniffer_id.to_string(),
            sniffer_mac: Some(mac.to_string()),
            geolocation: GeoPoint {
                latitude: *lat,
                longitude: *lon,
            },
            is_choke_point: *choke,
            camera_ids: if *choke {
                vec!["C201".into(), "C202".into()]
            } else {
                vec![]
            },
        })
        .collect();

    let arrival_profiles = places
        .iter()
        .zip(zone_scale)
        .map(|((zone_id, ..), scale)| ZoneArrivalProfile {
            zone_id: zone_id.to_string(),
            hourly_mean: ENTRANCE.map(|v| v * scale),
        })
        .collect();

    ScenarioConfig {
        seed: 42,
        origin: origin(),
        duration_hours: 7 * 24,
        window_seconds: 900,
        topology: ZoneTopology { zones },
        arrival_profiles,
        weekend_factor: 1.1,
        probe_interval: Default::default(),
        device_carry_rate: 0.75,
        passerby_rate: 60.0,
        transit_speed: TransitSpeed::Stroll,
        camera_accuracy: 0.85,
        camera_false_rate: 0.5,
        regime_shift: None,
    }
}
