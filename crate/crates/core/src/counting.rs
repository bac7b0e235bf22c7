//! Per-window device counting and camera tallying.
//!
//! A zone's raw crowd reading for a window is the number of distinct
//! pseudonymous devices that probed at least once inside it. The choke
//! point's reference reading is the sum of camera counts over both crossing
//! directions: cameras at a choke point count passages, so inbound and
//! outbound both contribute people.

use std::collections::HashSet;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::model::{CameraEvent, ProbeRecord, TimeWindow, Zone};

#[derive(Debug, Error)]
pub enum CountingError {
    #[error("probe at {timestamp} does not fall in window {window_index}")]
    ProbeOutsideWindow {
        timestamp: DateTime<Utc>,
        window_index: u64,
    },
    #[error("probe from sniffer {sniffer_id} does not belong to zone {zone_id}")]
    ForeignSniffer { sniffer_id: String, zone_id: String },
    #[error("camera event from {camera_id} at {timestamp} does not fall in window {window_index}")]
    EventOutsideWindow {
        camera_id: String,
        timestamp: DateTime<Utc>,
        window_index: u64,
    },
    #[error("camera event from {camera_id} has a zero count")]
    ZeroCount { camera_id: String },
}

/// All probes observed in one zone during one window. The constructor is the
/// only way to build one, so holders can rely on every probe lying inside
/// the window and coming from the zone's sniffer.
#[derive(Debug, Clone)]
pub struct WindowProbeSet {
    window: TimeWindow,
    zone_id: String,
    probes: Vec<ProbeRecord>,
}

impl WindowProbeSet {
    pub fn new(
        window: TimeWindow,
        zone: &Zone,
        probes: Vec<ProbeRecord>,
    ) -> Result<Self, CountingError> {
        for probe in &probes {
            if !window.contains(probe.timestamp) {
                return Err(CountingError::ProbeOutsideWindow {
                    timestamp: probe.timestamp,
                    window_index: window.index,
                });
            }
            if probe.sniffer_id != zone.sniffer_id {
                return Err(CountingError::ForeignSniffer {
                    sniffer_id: probe.sniffer_id.clone(),
                    zone_id: zone.zone_id.clone(),
                });
            }
        }
        Ok(WindowProbeSet {
            window,
            zone_id: zone.zone_id.clone(),
            probes,
        })
    }

    pub fn window(&self) -> TimeWindow {
        self.window
    }

    pub fn zone_id(&self) -> &str {
        &self.zone_id
    }

    pub fn probes(&self) -> &[ProbeRecord] {
        &self.probes
    }
}

/// Number of distinct devices that probed in the window. Repeats from one
/// device collapse to a single count.
pub fn count_devices(probes: &WindowProbeSet) -> u64 {
    let distinct: HashSet<&str> = probes.probes.iter().map(|p| p.device.as_str()).collect();
    distinct.len() as u64
}

/// People observed by the choke point cameras during the window: the sum of
/// event counts over both directions. Events outside the window or with a
/// zero count are contract violations.
pub fn camera_total(events: &[CameraEvent], window: &TimeWindow) -> Result<u64, CountingError> {
    let mut total = 0u64;
    for event in events {
        if !window.contains(event.timestamp) {
            return Err(CountingError::EventOutsideWindow {
                camera_id: event.camera_id.clone(),
                timestamp: event.timestamp,
                window_index: window.index,
            });
        }
        if event.count == 0 {
            return Err(CountingError::ZeroCount {
                camera_id: event.camera_id.clone(),
            });
        }
        total += event.count as u64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DeviceId, Direction, GeoPoint};
    use chrono::{Duration, TimeZone};

    fn window() -> TimeWindow {
        let origin = Utc.with_ymd_and_hms(2021, 6, 7, 0, 0, 0).unwrap();
        TimeWindow::from_index(0, 900, origin).unwrap()
    }

    fn zone() -> Zone {
        Zone {
            zone_id: "M1".into(),
            sniffer_id: "sniffer-1".into(),
            sniffer_mac: None,
            geolocation: GeoPoint {
                latitude: 0.0,
                longitude: 0.0,
            },
            is_choke_point: true,
            camera_ids: vec!["C103".into()],
        }
    }

    fn device(n: u8) -> DeviceId {
        DeviceId::new(hex::encode([n; 32])).unwrap()
    }

    fn probe(n: u8, offset_s: i64, seq: u32) -> ProbeRecord {
        ProbeRecord {
            device: device(n),
            sniffer_id: "sniffer-1".into(),
            timestamp: window().start + Duration::seconds(offset_s),
            sequence_number: seq,
            rssi: None,
        }
    }

    /// Independent distinct count: sort the id strings and count adjacency
    /// boundaries instead of hashing.
    fn count_by_sort(probes: &[ProbeRecord]) -> u64 {
        let mut ids: Vec<&str> = probes.iter().map(|p| p.device.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len() as u64
    }

    #[test]
    fn repeated_probes_count_one_device() {
        let probes = vec![probe(1, 10, 0), probe(1, 200, 1), probe(2, 500, 0)];
        let set = WindowProbeSet::new(window(), &zone(), probes.clone()).unwrap();
        assert_eq!(count_devices(&set), 2);
        assert_eq!(count_devices(&set), count_by_sort(&probes));
    }

    #[test]
    fn empty_window_counts_zero() {
        let set = WindowProbeSet::new(window(), &zone(), vec![]).unwrap();
        assert_eq!(count_devices(&set), 0);
    }

    #[test]
    fn hash_count_matches_sort_count_on_a_mixed_batch() {
        let mut probes = Vec::new();
        for n in 0..40u8 {
            for rep in 0..(1 + n % 4) as i64 {
                probes.push(probe(n % 13, (n as i64 * 7 + rep) % 900, rep as u32));
            }
        }
        let set = WindowProbeSet::new(window(), &zone(), probes.clone()).unwrap();
        assert_eq!(count_devices(&set), count_by_sort(&probes));
        assert_eq!(count_devices(&set), 13);
    }

    #[test]
    fn probe_set_rejects_out_of_window_and_foreign_probes() {
        let late = probe(1, 900, 0);
        assert!(matches!(
            WindowProbeSet::new(window(), &zone(), vec![late]),
            Err(CountingError::ProbeOutsideWindow { .. })
        ));

        let mut foreign = probe(1, 10, 0);
        foreign.sniffer_id = "sniffer-9".into();
        assert!(matches!(
            WindowProbeSet::new(window(), &zone(), vec![foreign]),
            Err(CountingError::ForeignSniffer { .. })
        ));
    }

    fn event(dir: Direction, offset_s: i64, count: u32) -> CameraEvent {
        CameraEvent {
            camera_id: "C103".into(),
            direction: dir,
            timestamp: window().start + Duration::seconds(offset_s),
            count,
        }
    }

    #[test]
    fn camera_total_sums_both_directions() {
        let events = vec![
            event(Direction::MoveIn, 5, 3),
            event(Direction::MoveOut, 100, 2),
            event(Direction::MoveIn, 899, 1),
        ];
        assert_eq!(camera_total(&events, &window()).unwrap(), 6);
        assert_eq!(camera_total(&[], &window()).unwrap(), 0);
    }

    #[test]
    fn camera_total_rejects_contract_violations() {
        let outside = vec![event(Direction::MoveIn, 900, 1)];
        assert!(matches!(
            camera_total(&outside, &window()),
            Err(CountingError::EventOutsideWindow { .. })
        ));
        let zero = vec![event(Direction::MoveIn, 5, 0)];
        assert!(matches!(
            camera_total(&zero, &window()),
            Err(CountingError::ZeroCount { .. })
        ));
    }
}
