//! Privacy-preserving federated learning with decentralized trust consensus.
//!
//! The crate wires four layers together: safe-prime group arithmetic with a
//! bounded discrete-log solver ([`group`]), decentralized multi-client
//! inner-product functional encryption ([`dmcfe`]), a negotiated participation
//! matrix with batch-privacy and disaggregation checks ([`participation`],
//! [`dtc`]), and a federated training engine with interaction-metered
//! transport ([`fl`], [`transport`]). The [`adversary`] module drives the
//! engine with a misbehaving aggregator to exercise the defenses.

pub mod adversary;
pub mod config;
pub mod dmcfe;
pub mod dtc;
pub mod encoding;
pub mod fl;
pub mod group;
pub mod metrics;
pub mod participation;
pub mod transport;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// 1-based protocol identity of a federation participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartyId(pub u32);

impl PartyId {
    pub fn from_index(i: usize) -> Self {
        PartyId(i as u32 + 1)
    }

    /// Position of this party in 0-based vectors of length `n`.
    pub fn index(self) -> usize {
        debug_assert!(self.0 >= 1, "party ids are 1-based");
        self.0 as usize - 1
    }
}

impl std::fmt::Display for PartyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// Derives an independent 64-bit seed from a master seed and a usage domain.
pub fn derive_seed(master: u64, domain: &str, salt: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_be_bytes());
    h.update([0x1f]);
    h.update(domain.as_bytes());
    h.update([0x1f]);
    h.update(salt.to_be_bytes());
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn party_id_round_trip() {
        assert_eq!(PartyId::from_index(0), PartyId(1));
        assert_eq!(PartyId(4).index(), 3);
        assert_eq!(PartyId(2).to_string(), "P2");
    }

    #[test]
    fn derived_seeds_are_domain_separated() {
        let a = derive_seed(7, "training", 1);
        let b = derive_seed(7, "training", 2);
        let c = derive_seed(7, "noise", 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, "training", 1));
    }
}
