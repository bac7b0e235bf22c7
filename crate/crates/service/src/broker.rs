//! Thin context broker: latest-value map plus history, with subscriptions
//! and push notifications.
//!
//! The wire documents use the NGSI naming conventions of the upstream
//! deployment, including the "nle:" prefixes, so consumers written against
//! that surface parse these bytes unchanged. Struct field order below is
//! the canonical document order; serialization preserves it.
//!
//! Entities materialize in query results with their first context update.
//! Zone topology decides which ids the pipeline publishes, but the broker
//! itself accepts any well-formed entity: it is a context store, not a
//! topology authority.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crowdcal_core::model::{timefmt, GeoPoint, TimeWindow, Zone};
use crowdcal_core::ZoneEstimate;

/// Entity type for every sniffer-backed zone.
pub const ENTITY_TYPE: &str = "nle:WiFiSniffer";
/// Attribute name and type carried by every entity.
pub const ATTRIBUTE_NAME: &str = "CrowdEstimation";
pub const ATTRIBUTE_TYPE: &str = "nle:CrowdEstimation";

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("entity type must be {ENTITY_TYPE}, got {0:?}")]
    WrongEntityType(String),
    #[error("attribute must be named {ATTRIBUTE_NAME} with type {ATTRIBUTE_TYPE}")]
    WrongAttribute,
    #[error("StartTime {start} must precede EndTime {end}")]
    EmptyInterval {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
    #[error("subscription needs exactly one of entityId or entityType")]
    AmbiguousPattern,
    #[error("reference must be an http or https URL, got {0:?}")]
    BadReference(String),
    #[error("no subscription with id {0:?}")]
    UnknownSubscription(String),
}

/// Static per-device descriptors attached to every entity document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetadata {
    #[serde(rename = "MacAddress")]
    pub mac_address: String,
    #[serde(rename = "nle:SimpleGeolocation")]
    pub geolocation: GeoPoint,
}

/// Attribute metadata: the window bounds, plus the unrounded estimate and
/// bootstrap flag so consumers can filter pre-calibration data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetadata {
    #[serde(rename = "StartTime", with = "timefmt")]
    pub start_time: DateTime<Utc>,
    #[serde(rename = "EndTime", with = "timefmt")]
    pub end_time: DateTime<Utc>,
    #[serde(rename = "calibratedValue")]
    pub calibrated_value: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdEstimationAttribute {
    pub name: String,
    #[serde(rename = "type")]
    pub attribute_type: String,
    #[serde(rename = "contextValue")]
    pub context_value: u64,
    pub metadata: AttributeMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntity {
    pub id: String,
    #[serde(rename = "type")]
    pub entity_type: String,
    #[serde(rename = "domainMetadata")]
    pub domain_metadata: DomainMetadata,
    #[serde(rename = "nle:CrowdEstimation")]
    pub attribute: CrowdEstimationAttribute,
}

impl ContextEntity {
    /// Structural checks every update must pass.
    pub fn validate(&self) -> Result<(), BrokerError> {
        if self.entity_type != ENTITY_TYPE {
            return Err(BrokerError::WrongEntityType(self.entity_type.clone()));
        }
        if self.attribute.name != ATTRIBUTE_NAME || self.attribute.attribute_type != ATTRIBUTE_TYPE
        {
            return Err(BrokerError::WrongAttribute);
        }
        let meta = &self.attribute.metadata;
        if meta.start_time >= meta.end_time {
            return Err(BrokerError::EmptyInterval {
                start: meta.start_time,
                end: meta.end_time,
            });
        }
        Ok(())
    }

    /// Builds the publishable document for one finalized zone estimate.
    pub fn from_estimate(
        zone: &Zone,
        window: TimeWindow,
        estimate: &ZoneEstimate,
    ) -> ContextEntity {
        ContextEntity {
            id: zone.sniffer_id.clone(),
            entity_type: ENTITY_TYPE.to_string(),
            domain_metadata: DomainMetadata {
                mac_address: zone.sniffer_mac.clone().unwrap_or_default(),
                geolocation: zone.geolocation,
            },
            attribute: CrowdEstimationAttribute {
                name: ATTRIBUTE_NAME.to_string(),
                attribute_type: ATTRIBUTE_TYPE.to_string(),
                context_value: round_half_up(estimate.calibrated),
                metadata: AttributeMetadata {
                    start_time: window.start,
                    end_time: window.end(),
                    calibrated_value: estimate.calibrated,
                    fallback: estimate.fallback,
                },
            },
        }
    }
}

/// Crowd sizes are non-negative, so rounding is plain half-up.
pub fn round_half_up(value: f64) -> u64 {
    (value + 0.5).floor().max(0.0) as u64
}

/// What a subscription matches: one entity id, or every entity of a type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityPattern {
    Id(String),
    Type(String),
}

impl EntityPattern {
    pub fn matches(&self, entity: &ContextEntity) -> bool {
        match self {
            EntityPattern::Id(id) => entity.id == *id,
            EntityPattern::Type(t) => entity.entity_type == *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub subscription_id: String,
    pub pattern: EntityPattern,
    pub reference_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expires: Option<DateTime<Utc>>,
}

/// A queued delivery: the exact bytes to POST and where.
#[derive(Debug, Clone)]
pub struct NotificationJob {
    pub subscription_id: String,
    pub reference_url: String,
    /// Serialized entity document; delivered verbatim.
    pub body: String,
}

/// In-memory broker state. Persistence of history and subscriptions is the
/// caller's job (the service store), keeping this testable in isolation.
#[derive(Debug, Default)]
pub struct BrokerState {
    latest: BTreeMap<String, ContextEntity>,
    subscriptions: BTreeMap<String, Subscription>,
    next_subscription: u64,
}

impl BrokerState {
    /// Replaces the latest value for the entity id and returns the
    /// notification jobs for every active matching subscription. Expired
    /// subscriptions encountered on the way are purged and reported.
    pub fn update(
        &mut self,
        entity: ContextEntity,
        now: DateTime<Utc>,
    ) -> Result<(Vec<NotificationJob>, Vec<String>), BrokerError> {
        entity.validate()?;
        let body = serde_json::to_string(&entity).expect("entity serializes");
        let mut expired = Vec::new();
        let mut jobs = Vec::new();
        for (id, sub) in &self.subscriptions {
            if sub.expires.is_some_and(|at| at <= now) {
                expired.push(id.clone());
                continue;
            }
            if sub.pattern.matches(&entity) {
                jobs.push(NotificationJob {
                    subscription_id: id.clone(),
                    reference_url: sub.reference_url.clone(),
                    body: body.clone(),
                });
            }
        }
        for id in &expired {
            self.subscriptions.remove(id);
        }
        self.latest.insert(entity.id.clone(), entity);
        Ok((jobs, expired))
    }

    /// Latest entity per id, selected by id or by type. Entity ids sort
    /// lexicographically in the result. Empty result is not an error.
    pub fn query(&self, id: Option<&str>, entity_type: Option<&str>) -> Vec<&ContextEntity> {
        self.latest
            .values()
            .filter(|e| id.is_none_or(|want| e.id == want))
            .filter(|e| entity_type.is_none_or(|want| e.entity_type == want))
            .collect()
    }

    /// Registers a subscription and returns it (with the assigned id).
    pub fn subscribe(
        &mut self,
        pattern: EntityPattern,
        reference_url: String,
        expires: Option<DateTime<Utc>>,
    ) -> Result<Subscription, BrokerError> {
        if !(reference_url.starts_with("http://") || reference_url.starts_with("https://")) {
            return Err(BrokerError::BadReference(reference_url));
        }
        self.next_subscription += 1;
        let sub = Subscription {
            subscription_id: format!("sub-{}", self.next_subscription),
            pattern,
            reference_url,
            expires,
        };
        self.subscriptions
            .insert(sub.subscription_id.clone(), sub.clone());
        Ok(sub)
    }

    pub fn unsubscribe(&mut self, subscription_id: &str) -> Result<Subscription, BrokerError> {
        self.subscriptions
            .remove(subscription_id)
            .ok_or_else(|| BrokerError::UnknownSubscription(subscription_id.to_string()))
    }

    /// Restores a persisted latest value (store replay on startup) without
    /// triggering notifications.
    pub fn restore_latest(&mut self, entity: ContextEntity) {
        self.latest.insert(entity.id.clone(), entity);
    }

    /// Restores one persisted subscription (store replay on startup).
    /// Keeps the id counter ahead of every restored id.
    pub fn restore_subscription(&mut self, sub: Subscription) {
        if let Some(n) = sub
            .subscription_id
            .strip_prefix("sub-")
            .and_then(|s| s.parse::<u64>().ok())
        {
            self.next_subscription = self.next_subscription.max(n);
        }
        self.subscriptions.insert(sub.subscription_id.clone(), sub);
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.subscriptions.values()
    }

    pub fn latest(&self, id: &str) -> Option<&ContextEntity> {
        self.latest.get(id)
    }
}
