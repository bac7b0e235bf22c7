//! MAC address anonymization.
//!
//! Raw hardware addresses are replaced at the ingestion boundary by the
//! lowercase hex SHA-256 digest of `salt || epoch_index || canonical MAC`.
//! The mapping is deterministic within one salt epoch, so repeated probes
//! from the same device collapse to one [`DeviceId`], and it is one way:
//! nothing downstream of ingestion can recover the address.
//!
//! Salt rotation is optional. When enabled, the epoch index advances every
//! `rotation period` seconds (anchored at the Unix epoch), which caps how
//! long any pseudonym stays linkable across windows. The period must be a
//! whole multiple of the window duration so an epoch never splits a window.

use chrono::{DateTime, Utc};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::DeviceId;

/// Smallest salt accepted, in bytes.
pub const MIN_SALT_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum AnonymizeError {
    #[error("salt must be at least {MIN_SALT_LEN} bytes, got {0}")]
    SaltTooShort(usize),
    #[error("salt is not valid hex: {0}")]
    SaltNotHex(String),
    #[error("rotation period must be positive")]
    ZeroRotationPeriod,
    #[error(
        "rotation period of {rotation_s}s is not a multiple of the {window_s}s window duration"
    )]
    RotationNotWindowAligned { rotation_s: u32, window_s: u32 },
    #[error("malformed mac address {0:?}")]
    MalformedMac(String),
}

/// Hashing salt plus the optional rotation policy.
#[derive(Debug, Clone)]
pub struct SaltConfig {
    salt: Vec<u8>,
    rotation_period_s: Option<u32>,
}

impl SaltConfig {
    /// Non-rotating salt. Pseudonyms stay stable for the deployment's life.
    pub fn new(salt: Vec<u8>) -> Result<Self, AnonymizeError> {
        if salt.len() < MIN_SALT_LEN {
            return Err(AnonymizeError::SaltTooShort(salt.len()));
        }
        Ok(SaltConfig {
            salt,
            rotation_period_s: None,
        })
    }

    /// Salt rotating every `rotation_s` seconds, which must be a positive
    /// multiple of the window duration.
    pub fn with_rotation(
        salt: Vec<u8>,
        rotation_s: u32,
        window_s: u32,
    ) -> Result<Self, AnonymizeError> {
        let mut config = SaltConfig::new(salt)?;
        if rotation_s == 0 {
            return Err(AnonymizeError::ZeroRotationPeriod);
        }
        if window_s == 0 || !rotation_s.is_multiple_of(window_s) {
            return Err(AnonymizeError::RotationNotWindowAligned {
                rotation_s,
                window_s,
            });
        }
        config.rotation_period_s = Some(rotation_s);
        Ok(config)
    }

    /// Salt supplied as a hex string, as in configuration files and the
    /// `SALT` environment variable.
    pub fn from_hex(hex_salt: &str) -> Result<Self, AnonymizeError> {
        let bytes = hex::decode(hex_salt.trim())
            .map_err(|_| AnonymizeError::SaltNotHex(hex_salt.to_string()))?;
        SaltConfig::new(bytes)
    }

    pub fn rotation_period_s(&self) -> Option<u32> {
        self.rotation_period_s
    }

    fn epoch_index(&self, at: DateTime<Utc>) -> u64 {
        match self.rotation_period_s {
            None => 0,
            Some(period_s) => {
                let ms = at.timestamp_millis().max(0) as u64;
                ms / (period_s as u64 * 1000)
            }
        }
    }
}

/// Normalizes a MAC address to uppercase colon-separated form. Accepts `:`
/// or `-` separators and any letter case; everything else is malformed.
pub fn canonical_mac(mac: &str) -> Result<String, AnonymizeError> {
    let parts: Vec<&str> = if mac.contains(':') {
        mac.split(':').collect()
    } else if mac.contains('-') {
        mac.split('-').collect()
    } else {
        return Err(AnonymizeError::MalformedMac(mac.to_string()));
    };
    if parts.len() != 6
        || parts
            .iter()
            .any(|p| p.len() != 2 || !p.bytes().all(|b| b.is_ascii_hexdigit()))
    {
        return Err(AnonymizeError::MalformedMac(mac.to_string()));
    }
    Ok(parts.join(":").to_ascii_uppercase())
}

/// Replaces a raw MAC address with its pseudonym for the salt epoch that
/// contains `at`.
pub fn anonymize(
    mac: &str,
    config: &SaltConfig,
    at: DateTime<Utc>,
) -> Result<DeviceId, AnonymizeError> {
    let canonical = canonical_mac(mac)?;
    let mut hasher = Sha256::new();
    hasher.update(&config.salt);
    hasher.update(config.epoch_index(at).to_be_bytes());
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    Ok(DeviceId::new(hex::encode(digest)).expect("sha256 hex digest is 64 lowercase hex chars"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 6, 7, 9, 30, 0).unwrap()
    }

    fn salt() -> SaltConfig {
        SaltConfig::new(b"0123456789abcdef".to_vec()).unwrap()
    }

    #[test]
    fn digest_matches_independent_reference() {
        // sha256(b"0123456789abcdef" + (0u64 big endian) + b"AA:BB:CC:DD:EE:FF"),
        // computed with an external SHA-256 implementation.
        let id = anonymize("AA:BB:CC:DD:EE:FF", &salt(), t0()).unwrap();
        assert_eq!(
            id.as_str(),
            "9895d6a05454d4308498850a67f6c022fa8ab30906e8868df5b1d48e4026e6b4"
        );
    }

    #[test]
    fn same_device_always_maps_to_same_id() {
        let a = anonymize("AA:BB:CC:DD:EE:FF", &salt(), t0()).unwrap();
        let b = anonymize("aa:bb:cc:dd:ee:ff", &salt(), t0()).unwrap();
        let c = anonymize("AA-BB-CC-DD-EE-FF", &salt(), t0()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn different_salt_changes_the_id() {
        let other = SaltConfig::new(b"fedcba9876543210".to_vec()).unwrap();
        let a = anonymize("AA:BB:CC:DD:EE:FF", &salt(), t0()).unwrap();
        let b = anonymize("AA:BB:CC:DD:EE:FF", &other, t0()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rotation_changes_the_id_across_epochs_only() {
        let config = SaltConfig::with_rotation(b"0123456789abcdef".to_vec(), 3600, 900).unwrap();
        let in_epoch = anonymize("AA:BB:CC:DD:EE:FF", &config, t0()).unwrap();
        let same_epoch = anonymize(
            "AA:BB:CC:DD:EE:FF",
            &config,
            t0() + chrono::Duration::minutes(10),
        )
        .unwrap();
        let next_epoch = anonymize(
            "AA:BB:CC:DD:EE:FF",
            &config,
            t0() + chrono::Duration::hours(1),
        )
        .unwrap();
        assert_eq!(in_epoch, same_epoch);
        assert_ne!(in_epoch, next_epoch);
    }

    #[test]
    fn epoch_zero_equals_the_unrotated_pseudonym() {
        // The digest layout is shared, with epoch index pinned to 0 when
        // rotation is off.
        let rotating = SaltConfig::with_rotation(b"0123456789abcdef".to_vec(), 3600, 900).unwrap();
        let early = Utc.with_ymd_and_hms(1970, 1, 1, 0, 30, 0).unwrap();
        assert_eq!(
            anonymize("AA:BB:CC:DD:EE:FF", &rotating, early).unwrap(),
            anonymize("AA:BB:CC:DD:EE:FF", &salt(), early).unwrap()
        );
    }

    #[test]
    fn short_salt_is_rejected() {
        assert!(matches!(
            SaltConfig::new(b"too short".to_vec()),
            Err(AnonymizeError::SaltTooShort(9))
        ));
    }

    #[test]
    fn rotation_must_align_with_window_duration() {
        assert!(matches!(
            SaltConfig::with_rotation(b"0123456789abcdef".to_vec(), 1000, 900),
            Err(AnonymizeError::RotationNotWindowAligned { .. })
        ));
        assert!(matches!(
            SaltConfig::with_rotation(b"0123456789abcdef".to_vec(), 0, 900),
            Err(AnonymizeError::ZeroRotationPeriod)
        ));
        assert!(SaltConfig::with_rotation(b"0123456789abcdef".to_vec(), 2700, 900).is_ok());
    }

    #[test]
    fn hex_salt_parsing() {
        assert!(SaltConfig::from_hex("00112233445566778899aabbccddeeff").is_ok());
        assert!(matches!(
            SaltConfig::from_hex("not hex"),
            Err(AnonymizeError::SaltNotHex(_))
        ));
        // 8 bytes of hex decodes fine but is below the minimum length.
        assert!(matches!(
            SaltConfig::from_hex("0011223344556677"),
            Err(AnonymizeError::SaltTooShort(8))
        ));
    }

    #[test]
    fn malformed_macs_are_rejected() {
        for bad in [
            "AA:BB:CC:DD:EE",
            "AA:BB:CC:DD:EE:FF:00",
            "AABBCCDDEEFF",
            "AA:BB:CC:DD:EE:GG",
            "AA.BB.CC.DD.EE.FF",
            "",
        ] {
            assert!(
                matches!(canonical_mac(bad), Err(AnonymizeError::MalformedMac(_))),
                "accepted {bad:?}"
            );
        }
        assert_eq!(
            canonical_mac("aa-bb-cc-dd-ee-ff").unwrap(),
            "AA:BB:CC:DD:EE:FF"
        );
    }

    #[test]
    fn output_never_contains_the_input_address() {
        let id = anonymize("AA:BB:CC:DD:EE:FF", &salt(), t0()).unwrap();
        assert_eq!(id.as_str().len(), 64);
        assert!(!id.as_str().to_uppercase().contains("AA:BB"));
    }
}
