use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use ulid::Ulid;

use crate::clock::Millis;

pub const JOB_ID_LEN: usize = 26;

/// Unique job identifier: 48-bit millisecond timestamp followed by 80 random
/// bits, rendered as 26 characters of lowercase Crockford base32.
///
/// Because the timestamp occupies the most significant bits, ids created at
/// least one millisecond apart sort lexicographically in creation order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JobId(String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid job id {0:?}: expected 26 lowercase base32 characters")]
pub struct InvalidJobId(pub String);

impl JobId {
    /// Builds an id from an explicit timestamp and entropy source.
    pub fn generate(now_ms: Millis, entropy: &mut impl RngCore) -> Self {
        let mut random = [0u8; 16];
        entropy.fill_bytes(&mut random[6..]);
        let random = u128::from_be_bytes(random);
        Self::from_parts(now_ms, random)
    }

    /// `random` is truncated to its low 80 bits and `now_ms` to 48 bits.
    pub fn from_parts(now_ms: Millis, random: u128) -> Self {
        let ulid = Ulid::from_parts(now_ms & 0xffff_ffff_ffff, random);
        Self(ulid.to_string().to_ascii_lowercase())
    }

    pub fn parse(s: &str) -> Result<Self, InvalidJobId> {
        // 26 base32 digits carry 130 bits; the top two must be zero.
        let well_formed = s.len() == JOB_ID_LEN
            && s.as_bytes()[0] <= b'7'
            && s.bytes().all(|b| b.is_ascii_digit() || b.is_ascii_lowercase())
            && Ulid::from_string(s).is_ok();
        if well_formed {
            Ok(Self(s.to_owned()))
        } else {
            Err(InvalidJobId(s.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Millisecond timestamp encoded in the id prefix.
    pub fn timestamp_ms(&self) -> Millis {
        Ulid::from_string(&self.0).map(|u| u.timestamp_ms()).unwrap_or(0)
    }
}

/// Generates a job id from the system clock and thread-local entropy.
pub fn make_job_id(clock: &dyn crate::clock::Clock) -> JobId {
    JobId::generate(clock.now_ms(), &mut rand::rng())
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for JobId {
    type Err = InvalidJobId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl AsRef<str> for JobId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for JobId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for JobId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        JobId::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use std::collections::HashSet;

    struct Zeros;

    impl RngCore for Zeros {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0);
        }
    }

    #[test]
    fn zero_clock_and_entropy() {
        let id = JobId::generate(0, &mut Zeros);
        assert_eq!(id.as_str(), "00000000000000000000000000");
    }

    #[test]
    fn shape_matches_pattern() {
        let mut rng = StdRng::seed_from_u64(7);
        for t in [0, 1, 1_700_000_000_000, (1u64 << 48) - 1] {
            let id = JobId::generate(t, &mut rng);
            assert_eq!(id.as_str().len(), 26);
            assert!(id
                .as_str()
                .bytes()
                .all(|b| b.is_ascii_digit() || b.is_ascii_lowercase()));
            assert_eq!(id.timestamp_ms(), t);
            assert_eq!(JobId::parse(id.as_str()).unwrap(), id);
        }
    }

    #[test]
    fn timestamp_prefix_orders_ids() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = JobId::generate(1000, &mut rng);
        let b = JobId::generate(3000, &mut rng);
        assert!(a.as_str() < b.as_str());
    }

    #[test]
    fn hundred_thousand_distinct() {
        let clock = crate::clock::SystemClock;
        let ids: HashSet<_> = (0..100_000).map(|_| make_job_id(&clock)).collect();
        assert_eq!(ids.len(), 100_000);
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "",
            "0000000000000000000000000",
            "000000000000000000000000000",
            "0000000000000000000000000A",
            "000000000000000000000000/0",
            "../../../../etc/passwd0000",
            // exceeds 128 bits
            "80000000000000000000000000",
        ] {
            assert!(JobId::parse(bad).is_err(), "{bad:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn ordering_follows_time(t1 in 0u64..(1u64 << 47), gap in 2u64..1_000_000, r1: u128, r2: u128) {
            let a = JobId::from_parts(t1, r1);
            let b = JobId::from_parts(t1 + gap, r2);
            proptest::prop_assert!(a < b);
        }
    }
}
