//! Decentralized multi-client functional encryption for inner products.
//!
//! Each party holds a two-scalar secret and pairwise PRF seeds. Ciphertexts
//! bind a payload to a label through hashed group elements; functional key
//! shares bind a fusion-weight vector to a tag and embed pairwise zero shares
//! that only cancel when every party contributed a share for the same tag.
//! Decryption recovers the weighted integer sum through a bounded discrete
//! log, so a mismatched label or tag surfaces as `DlogNotFound` instead of a
//! wrong value.

use crate::group::{DlogSolver, GroupError, GroupParams};
use crate::PartyId;
use num_bigint::BigUint;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DmcfeError {
    #[error("party count must be at least 2, got {0}")]
    TooFewParties(usize),
    #[error("discrete-log bound {bound} exceeds what the subgroup can host; use a larger group")]
    GroupTooSmall { bound: u64 },
    #[error("payload coordinate {index} is {value}, outside +/-{bound}")]
    PayloadOutOfRange { index: usize, value: i64, bound: u64 },
    #[error("weight vector has length {got}, expected {expected}")]
    WeightLengthMismatch { expected: usize, got: usize },
    #[error("expected one key share per party; missing {0:?}")]
    MissingShares(Vec<PartyId>),
    #[error("duplicate key share from {0}")]
    DuplicateShare(PartyId),
    #[error("key shares carry different fusion tags")]
    MixedFusionTag,
    #[error("ciphertext set does not match the weight support; missing {missing:?}, extra {extra:?}")]
    SupportMismatch {
        missing: Vec<PartyId>,
        extra: Vec<PartyId>,
    },
    #[error("ciphertext from {0} carries a different label")]
    LabelMismatch(PartyId),
    #[error("ciphertexts disagree on coordinate count")]
    DimensionMismatch,
    #[error("aggregate did not decode to a bounded exponent (label or key mismatch, or payload overflow)")]
    DlogNotFound,
    #[error(transparent)]
    Group(#[from] GroupError),
}

impl DmcfeError {
    /// True when decryption failed in the way replayed or mismatched
    /// material fails.
    pub fn is_dlog_failure(&self) -> bool {
        matches!(
            self,
            DmcfeError::DlogNotFound | DmcfeError::Group(GroupError::DlogNotFound { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, DmcfeError>;

/// Shared parameters fixing the group, the federation size, and the payload
/// bounds that size the decryption search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicParams {
    pub group: GroupParams,
    pub parties: usize,
    /// Per-coordinate payload magnitude bound enforced at encryption.
    pub payload_bound: u64,
    /// Search bound for decryption: parties * payload_bound * max weight scale.
    pub dlog_bound: u64,
}

/// Fixes public parameters after checking the group can host the bounds.
pub fn setup(
    group: GroupParams,
    parties: usize,
    payload_bound: u64,
    max_weight_scale: u64,
) -> Result<PublicParams> {
    if parties < 2 {
        return Err(DmcfeError::TooFewParties(parties));
    }
    let dlog_bound = parties as u64 * payload_bound * max_weight_scale;
    let range = BigUint::from(2 * dlog_bound + 1);
    if range > group.q {
        return Err(DmcfeError::GroupTooSmall { bound: dlog_bound });
    }
    Ok(PublicParams {
        group,
        parties,
        payload_bound,
        dlog_bound,
    })
}

/// Pairwise seed shared by exactly two parties.
pub type PairwiseSeed = [u8; 32];

/// A party's encryption and key-share secrets. The aggregator must never
/// hold one of these; the engine only moves them party-side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartySecretKey {
    pub party: PartyId,
    #[serde(with = "crate::group::dec_string")]
    pub s1: BigUint,
    #[serde(with = "crate::group::dec_string")]
    pub s2: BigUint,
    /// Seeds keyed by the other party's id; symmetric across the pair.
    pub pairwise: BTreeMap<u32, PairwiseSeed>,
}

/// Dealer-mode key ceremony: draws every secret locally and fills the
/// pairwise seed table directly. Deployed federations derive the same table
/// through the brokered Diffie-Hellman exchange below.
pub fn keygen_ceremony<R: rand::Rng>(pp: &PublicParams, rng: &mut R) -> Vec<PartySecretKey> {
    let n = pp.parties;
    let mut keys: Vec<PartySecretKey> = (0..n)
        .map(|i| PartySecretKey {
            party: PartyId::from_index(i),
            s1: pp.group.random_scalar(rng),
            s2: pp.group.random_scalar(rng),
            pairwise: BTreeMap::new(),
        })
        .collect();
    for i in 0..n {
        for j in (i + 1)..n {
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            keys[i].pairwise.insert(j as u32 + 1, seed);
            keys[j].pairwise.insert(i as u32 + 1, seed);
        }
    }
    keys
}

/// Ephemeral Diffie-Hellman keypair in the same group, used once during the
/// brokered setup to agree pairwise seeds without a dealer.
#[derive(Debug, Clone)]
pub struct DhKeypair {
    pub secret: BigUint,
    pub public: BigUint,
}

impl DhKeypair {
    pub fn generate<R: rand::Rng>(group: &GroupParams, rng: &mut R) -> Self {
        let secret = group.random_scalar(rng);
        let public = group.pow(&group.g, &secret);
        DhKeypair { secret, public }
    }
}

/// Derives the pairwise seed from a completed DH exchange; both ends compute
/// the same value because the transcript is ordered by party id.
pub fn derive_pairwise_seed(
    group: &GroupParams,
    own: &DhKeypair,
    their_public: &BigUint,
    own_id: PartyId,
    their_id: PartyId,
) -> PairwiseSeed {
    let shared = group.pow(their_public, &own.secret);
    let (lo, hi) = if own_id.0 < their_id.0 {
        (own_id.0, their_id.0)
    } else {
        (their_id.0, own_id.0)
    };
    let mut h = Sha256::new();
    h.update(b"pairwise-seed");
    h.update(lo.to_be_bytes());
    h.update(hi.to_be_bytes());
    h.update(shared.to_bytes_be());
    h.finalize().into()
}

/// Tag binding a functional key share to one fusion: the round index plus
/// the canonical bytes of the integerized weight vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FusionTag(Vec<u8>);

impl FusionTag {
    pub fn new(round: u32, scaled_weights: &[i64]) -> Self {
        let mut bytes = Vec::with_capacity(8 + scaled_weights.len() * 8);
        bytes.extend_from_slice(&round.to_be_bytes());
        bytes.extend_from_slice(&(scaled_weights.len() as u32).to_be_bytes());
        for w in scaled_weights {
            bytes.extend_from_slice(&w.to_be_bytes());
        }
        FusionTag(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        FusionTag(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

mod tag_b64 {
    use super::FusionTag;
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(tag: &FusionTag, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(tag.as_bytes()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FusionTag, D::Error> {
        let raw = String::deserialize(d)?;
        STANDARD
            .decode(raw.as_bytes())
            .map(FusionTag::from_bytes)
            .map_err(D::Error::custom)
    }
}

mod bytes_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &Vec<u8>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let raw = String::deserialize(d)?;
        STANDARD.decode(raw.as_bytes()).map_err(D::Error::custom)
    }
}

mod dec_vec {
    use num_bigint::BigUint;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[BigUint], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.to_str_radix(10)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigUint>, D::Error> {
        let raw: Vec<String> = Vec::deserialize(d)?;
        raw.iter()
            .map(|x| {
                BigUint::parse_bytes(x.as_bytes(), 10)
                    .ok_or_else(|| D::Error::custom(format!("not a decimal integer: {x:?}")))
            })
            .collect()
    }
}

/// Label-bound encryption of one integer vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ciphertext {
    pub party: PartyId,
    #[serde(with = "bytes_b64")]
    pub label: Vec<u8>,
    #[serde(with = "dec_vec")]
    pub coords: Vec<BigUint>,
}

impl Ciphertext {
    /// Checks every coordinate is a subgroup member; for material read off
    /// the wire.
    pub fn validate(&self, pp: &PublicParams) -> Result<()> {
        for c in &self.coords {
            if !pp.group.in_subgroup(c) {
                return Err(DmcfeError::Group(GroupError::NotInSubgroup));
            }
        }
        Ok(())
    }
}

/// One party's share of a functional decryption key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyShare {
    pub party: PartyId,
    #[serde(with = "tag_b64")]
    pub tag: FusionTag,
    #[serde(with = "dec_vec")]
    pub d: Vec<BigUint>,
}

/// Combined functional decryption key for one fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct DecryptionKey {
    pub tag: FusionTag,
    pub d1: BigUint,
    pub d2: BigUint,
}

fn coord_label(label: &[u8], k: usize) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(label.len() + 12);
    bytes.extend_from_slice(&(label.len() as u64).to_be_bytes());
    bytes.extend_from_slice(label);
    bytes.extend_from_slice(&(k as u32).to_be_bytes());
    bytes
}

/// Encrypts one bounded integer vector under a label.
pub fn encrypt(
    pp: &PublicParams,
    sk: &PartySecretKey,
    payload: &[i64],
    label: &[u8],
) -> Result<Ciphertext> {
    let grp = &pp.group;
    let mut coords = Vec::with_capacity(payload.len());
    for (k, &x) in payload.iter().enumerate() {
        if x.unsigned_abs() > pp.payload_bound {
            return Err(DmcfeError::PayloadOutOfRange {
                index: k,
                value: x,
                bound: pp.payload_bound,
            });
        }
        let (u1, u2) = grp.hash_to_group(&coord_label(label, k));
        let mask = grp.mul(&grp.pow(&u1, &sk.s1), &grp.pow(&u2, &sk.s2));
        coords.push(grp.mul(&mask, &grp.pow_signed(&grp.g, x)));
    }
    Ok(Ciphertext {
        party: sk.party,
        label: label.to_vec(),
        coords,
    })
}

/// PRF over a pairwise seed, expanded wide enough that reduction mod q is
/// statistically close to uniform.
fn pairwise_prf(group: &GroupParams, seed: &PairwiseSeed, component: u8, tag: &FusionTag) -> BigUint {
    let byte_len = ((group.q.bits() + 128) / 8 + 1) as usize;
    let mut bytes = Vec::with_capacity(byte_len);
    let mut block = 0u32;
    while bytes.len() < byte_len {
        let mut h = Sha256::new();
        h.update(b"zero-share");
        h.update(seed);
        h.update([component]);
        h.update((tag.as_bytes().len() as u64).to_be_bytes());
        h.update(tag.as_bytes());
        h.update(block.to_be_bytes());
        bytes.extend_from_slice(&h.finalize());
        block += 1;
    }
    bytes.truncate(byte_len);
    BigUint::from_bytes_be(&bytes) % &group.q
}

/// This party's two-component zero share for a tag: the signed sum of
/// pairwise PRF values, positive toward lower-numbered peers. Summed over
/// all parties the shares telescope to zero.
fn zero_share(group: &GroupParams, sk: &PartySecretKey, component: u8, tag: &FusionTag) -> BigUint {
    let mut acc = BigUint::zero();
    for (&other, seed) in &sk.pairwise {
        let v = pairwise_prf(group, seed, component, tag);
        if sk.party.0 > other {
            acc = (acc + v) % &group.q;
        } else {
            acc = (acc + (&group.q - v % &group.q)) % &group.q;
        }
    }
    acc
}

/// Produces this party's functional key share for an integerized weight
/// vector, blinded by the tag-bound zero share.
pub fn key_der_share(
    pp: &PublicParams,
    sk: &PartySecretKey,
    scaled_weights: &[i64],
    tag: &FusionTag,
) -> Result<KeyShare> {
    if scaled_weights.len() != pp.parties {
        return Err(DmcfeError::WeightLengthMismatch {
            expected: pp.parties,
            got: scaled_weights.len(),
        });
    }
    let grp = &pp.group;
    let y = grp.scalar_from_signed(scaled_weights[sk.party.index()]);
    let d1 = (&y * &sk.s1 + zero_share(grp, sk, 1, tag)) % &grp.q;
    let d2 = (&y * &sk.s2 + zero_share(grp, sk, 2, tag)) % &grp.q;
    Ok(KeyShare {
        party: sk.party,
        tag: tag.clone(),
        d: vec![d1, d2],
    })
}

/// Combines one share from every party into the functional decryption key.
/// Shares must agree on the fusion tag, otherwise the zero shares cannot
/// telescope and the result would be useless; that case is rejected here.
pub fn key_der_comb(pp: &PublicParams, shares: &[KeyShare]) -> Result<DecryptionKey> {
    let mut seen = vec![false; pp.parties];
    for share in shares {
        let idx = share.party.index();
        if idx >= pp.parties {
            return Err(DmcfeError::MissingShares(vec![share.party]));
        }
        if seen[idx] {
            return Err(DmcfeError::DuplicateShare(share.party));
        }
        seen[idx] = true;
    }
    let missing: Vec<PartyId> = seen
        .iter()
        .enumerate()
        .filter(|(_, s)| !**s)
        .map(|(i, _)| PartyId::from_index(i))
        .collect();
    if !missing.is_empty() {
        return Err(DmcfeError::MissingShares(missing));
    }
    let tag = &shares[0].tag;
    if shares.iter().any(|s| &s.tag != tag) {
        return Err(DmcfeError::MixedFusionTag);
    }
    Ok(force_combine(pp, shares))
}

/// Sums shares without any consistency checks. This is what an adversary can
/// always do with material in hand, so the security argument cannot rest on
/// `key_der_comb`'s checks; tests use this to show mixed-tag shares produce
/// a key that fails decryption.
pub fn force_combine(pp: &PublicParams, shares: &[KeyShare]) -> DecryptionKey {
    let q = &pp.group.q;
    let mut d1 = BigUint::zero();
    let mut d2 = BigUint::zero();
    for share in shares {
        d1 = (d1 + &share.d[0]) % q;
        d2 = (d2 + &share.d[1]) % q;
    }
    DecryptionKey {
        tag: shares[0].tag.clone(),
        d1,
        d2,
    }
}

/// Decrypts the weighted integer sum of the given ciphertexts.
///
/// The ciphertext set must cover exactly the support of the weight vector;
/// every ciphertext must carry the same label the key material was produced
/// for, or the bounded discrete log fails.
pub fn decrypt(
    pp: &PublicParams,
    dk: &DecryptionKey,
    cts: &[Ciphertext],
    scaled_weights: &[i64],
    label: &[u8],
) -> Result<Vec<i64>> {
    if scaled_weights.len() != pp.parties {
        return Err(DmcfeError::WeightLengthMismatch {
            expected: pp.parties,
            got: scaled_weights.len(),
        });
    }
    let support: Vec<PartyId> = scaled_weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w != 0)
        .map(|(i, _)| PartyId::from_index(i))
        .collect();
    let provided: Vec<PartyId> = cts.iter().map(|c| c.party).collect();
    let missing: Vec<PartyId> = support
        .iter()
        .filter(|p| !provided.contains(p))
        .copied()
        .collect();
    let extra: Vec<PartyId> = provided
        .iter()
        .filter(|p| !support.contains(p))
        .copied()
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(DmcfeError::SupportMismatch { missing, extra });
    }

    let dim = cts.first().map(|c| c.coords.len()).unwrap_or(0);
    for ct in cts {
        if ct.label != label {
            return Err(DmcfeError::LabelMismatch(ct.party));
        }
        if ct.coords.len() != dim {
            return Err(DmcfeError::DimensionMismatch);
        }
    }

    let grp = &pp.group;
    let solver = DlogSolver::new(grp, pp.dlog_bound)?;
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim {
        let mut acc = num_traits::One::one();
        for ct in cts {
            let w = scaled_weights[ct.party.index()];
            acc = grp.mul(&acc, &grp.pow_signed(&ct.coords[k], w));
        }
        let (u1, u2) = grp.hash_to_group(&coord_label(label, k));
        let mask = grp.mul(&grp.pow(&u1, &dk.d1), &grp.pow(&u2, &dk.d2));
        let stripped = grp.mul(&acc, &grp.inv(&mask));
        match solver.solve(&stripped) {
            Ok(x) => out.push(x),
            Err(GroupError::DlogNotFound { .. }) => return Err(DmcfeError::DlogNotFound),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn test_group() -> GroupParams {
        GroupParams::generate_insecure(16, Some(2)).unwrap()
    }

    fn weighted_sum(payloads: &[Vec<i64>], weights: &[i64]) -> Vec<i64> {
        let dim = payloads[0].len();
        (0..dim)
            .map(|k| {
                payloads
                    .iter()
                    .zip(weights)
                    .map(|(p, &w)| p[k] * w)
                    .sum::<i64>()
            })
            .collect()
    }

    /// End-to-end flow against an independently computed plaintext sum.
    #[test]
    fn decrypts_the_weighted_sum_and_nothing_else() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let pp = setup(test_group(), 4, 60, 1).unwrap();
        let keys = keygen_ceremony(&pp, &mut rng);
        let payloads: Vec<Vec<i64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.gen_range(-60i64..=60)).collect())
            .collect();
        let weights = vec![1i64, 1, 0, 1];
        let label = b"round-7";
        let tag = FusionTag::new(7, &weights);

        let cts: Vec<Ciphertext> = keys
            .iter()
            .zip(&payloads)
            .filter(|(k, _)| weights[k.party.index()] != 0)
            .map(|(k, p)| encrypt(&pp, k, p, label).unwrap())
            .collect();
        let shares: Vec<KeyShare> = keys
            .iter()
            .map(|k| key_der_share(&pp, k, &weights, &tag).unwrap())
            .collect();
        let dk = key_der_comb(&pp, &shares).unwrap();
        let got = decrypt(&pp, &dk, &cts, &weights, label).unwrap();
        assert_eq!(got, weighted_sum(&payloads, &weights));
    }

    #[test]
    fn random_trials_match_the_plaintext_oracle() {
        let grp = test_group();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for trial in 0..60 {
            let n = rng.gen_range(2usize..=5);
            let dim = rng.gen_range(1usize..=4);
            let pp = setup(grp.clone(), n, 40, 1).unwrap();
            let keys = keygen_ceremony(&pp, &mut rng);
            let payloads: Vec<Vec<i64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-40i64..=40)).collect())
                .collect();
            let weights: Vec<i64> = (0..n)
                .map(|i| if i == 0 { 1 } else { rng.gen_range(0i64..=1) })
                .collect();
            let label = format!("trial-{trial}");
            let tag = FusionTag::new(trial, &weights);
            let cts: Vec<Ciphertext> = keys
                .iter()
                .zip(&payloads)
                .filter(|(k, _)| weights[k.party.index()] != 0)
                .map(|(k, p)| encrypt(&pp, k, p, label.as_bytes()).unwrap())
                .collect();
            let shares: Vec<KeyShare> = keys
                .iter()
                .map(|k| key_der_share(&pp, k, &weights, &tag).unwrap())
                .collect();
            let dk = key_der_comb(&pp, &shares).unwrap();
            let got = decrypt(&pp, &dk, &cts, &weights, label.as_bytes()).unwrap();
            assert_eq!(got, weighted_sum(&payloads, &weights), "trial {trial}");
        }
    }

    #[test]
    fn zero_shares_telescope_to_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let pp = setup(test_group(), 5, 10, 1).unwrap();
        let keys = keygen_ceremony(&pp, &mut rng);
        let tag = FusionTag::new(1, &[1, 1, 1, 1, 1]);
        for component in [1u8, 2] {
            let mut acc = BigUint::zero();
            for k in &keys {
                acc = (acc + zero_share(&pp.group, k, component, &tag)) % &pp.group.q;
            }
            assert!(acc.is_zero(), "component {component}");
        }
    }

    #[test]
    fn dealer_seeds_are_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let pp = setup(test_group(), 3, 10, 1).unwrap();
        let keys = keygen_ceremony(&pp, &mut rng);
        assert_eq!(keys[0].pairwise[&2], keys[1].pairwise[&1]);
        assert_eq!(keys[1].pairwise[&3], keys[2].pairwise[&2]);
        assert_ne!(keys[0].pairwise[&2], keys[0].pairwise[&3]);
    }

    #[test]
    fn dh_derivation_agrees_on_both_ends() {
        let grp = test_group();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = DhKeypair::generate(&grp, &mut rng);
        let b = DhKeypair::generate(&grp, &mut rng);
        let ab = derive_pairwise_seed(&grp, &a, &b.public, PartyId(1), PartyId(2));
        let ba = derive_pairwise_seed(&grp, &b, &a.public, PartyId(2), PartyId(1));
        assert_eq!(ab, ba);
        let ac = derive_pairwise_seed(&grp, &a, &b.public, PartyId(1), PartyId(3));
        assert_ne!(ab, ac);
    }

    #[test]
    fn payloads_outside_the_bound_are_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let pp = setup(test_group(), 2, 50, 1).unwrap();
        let keys = keygen_ceremony(&pp, &mut rng);
        let err = encrypt(&pp, &keys[0], &[51], b"l").unwrap_err();
        assert!(matches!(
            err,
            DmcfeError::PayloadOutOfRange { index: 0, value: 51, bound: 50 }
        ));
        encrypt(&pp, &keys[0], &[-50, 50], b"l").unwrap();
    }

    #[test]
    fn combining_requires_exactly_one_share_per_party() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let pp = setup(test_group(), 3, 10, 1).unwrap();
        let keys = keygen_ceremony(&pp, &mut rng);
        let weights = vec![1i64, 1, 1];
        let tag = FusionTag::new(0, &weights);
        let shares: Vec<KeyShare> = keys
            .iter()
            .map(|k| key_der_share(&pp, k, &weights, &tag).unwrap())
            .collect();

        let err = key_der_comb(&pp, &shares[..2]).unwrap_err();
        assert!(matches!(err, DmcfeError::MissingShares(ref m) if m == &vec![PartyId(3)]));

        let mut dup = shares.clone();
        dup[2] = shares[0].clone();
        assert!(matches!(
            key_der_comb(&pp, &dup),
            Err(DmcfeError::DuplicateShare(PartyId(1)))
        ));
    }

    #[test]
    fn mixed_tags_are_rejected_and_useless_even_if_forced() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let pp = setup(test_group(), 3, 50, 1).unwrap();
        let keys = keygen_ceremony(&pp, &mut rng);
        let weights = vec![1i64, 1, 1];
        let tag_a = FusionTag::new(0, &weights);
        let tag_b = FusionTag::new(1, &weights);

        let mut shares: Vec<KeyShare> = keys
            .iter()
            .map(|k| key_der_share(&pp, k, &weights, &tag_a).unwrap())
            .collect();
        shares[1] = key_der_share(&pp, &keys[1], &weights, &tag_b).unwrap();

        assert!(matches!(
            key_der_comb(&pp, &shares),
            Err(DmcfeError::MixedFusionTag)
        ));

        // An attacker can still sum the shares; the key just fails to strip
        // the masks because the zero shares no longer cancel.
        let forced = force_combine(&pp, &shares);
        let label = b"round-0";
        let cts: Vec<Ciphertext> = keys
            .iter()
            .map(|k| encrypt(&pp, k, &[5], label).unwrap())
            .collect();
        let err = decrypt(&pp, &forced, &cts, &weights, label).unwrap_err();
        assert!(err.is_dlog_failure());
    }

    #[test]
    fn replayed_labels_fail_decryption() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let pp = setup(test_group(), 3, 50, 1).unwrap();
        let keys = keygen_ceremony(&pp, &mut rng);
        let weights = vec![1i64, 1, 1];
        let tag = FusionTag::new(2, &weights);
        let shares: Vec<KeyShare> = keys
            .iter()
            .map(|k| key_der_share(&pp, k, &weights, &tag).unwrap())
            .collect();
        let dk = key_der_comb(&pp, &shares).unwrap();

        let mut cts: Vec<Ciphertext> = keys
            .iter()
            .map(|k| encrypt(&pp, k, &[7], b"round-2").unwrap())
            .collect();
        // Party 2's ciphertext is replayed from an earlier round: re-encrypt
        // under the old label, then splice it in with the label field forged.
        let stale = encrypt(&pp, &keys[1], &[7], b"round-1").unwrap();
        cts[1] = Ciphertext {
            label: b"round-2".to_vec(),
            ..stale
        };
        let err = decrypt(&pp, &dk, &cts, &weights, b"round-2").unwrap_err();
        assert!(err.is_dlog_failure(), "got {err:?}");
    }

    #[test]
    fn honest_label_mismatch_is_flagged_before_decrypting() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let pp = setup(test_group(), 2, 50, 1).unwrap();
        let keys = keygen_ceremony(&pp, &mut rng);
        let weights = vec![1i64, 1];
        let tag = FusionTag::new(3, &weights);
        let shares: Vec<KeyShare> = keys
            .iter()
            .map(|k| key_der_share(&pp, k, &weights, &tag).unwrap())
            .collect();
        let dk = key_der_comb(&pp, &shares).unwrap();
        let cts = vec![
            encrypt(&pp, &keys[0], &[1], b"round-3").unwrap(),
            encrypt(&pp, &keys[1], &[1], b"round-4").unwrap(),
        ];
        assert!(matches!(
            decrypt(&pp, &dk, &cts, &weights, b"round-3"),
            Err(DmcfeError::LabelMismatch(PartyId(2)))
        ));
    }

    #[test]
    fn support_mismatch_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let pp = setup(test_group(), 3, 50, 1).unwrap();
        let keys = keygen_ceremony(&pp, &mut rng);
        let weights = vec![1i64, 0, 1];
        let tag = FusionTag::new(4, &weights);
        let shares: Vec<KeyShare> = keys
            .iter()
            .map(|k| key_der_share(&pp, k, &weights, &tag).unwrap())
            .collect();
        let dk = key_der_comb(&pp, &shares).unwrap();
        // Ciphertext from the weight-0 party instead of party 3.
        let cts = vec![
            encrypt(&pp, &keys[0], &[1], b"l").unwrap(),
            encrypt(&pp, &keys[1], &[1], b"l").unwrap(),
        ];
        let err = decrypt(&pp, &dk, &cts, &weights, b"l").unwrap_err();
        assert!(matches!(err, DmcfeError::SupportMismatch { .. }));
    }

    #[test]
    fn setup_rejects_groups_too_small_for_the_bound() {
        // 16-bit subgroup order ~2^15; bound 5 * 10^5 cannot fit.
        let err = setup(test_group(), 5, 100_000, 1).unwrap_err();
        assert!(matches!(err, DmcfeError::GroupTooSmall { .. }));
    }

    #[test]
    fn ciphertext_serde_matches_the_wire_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let pp = setup(test_group(), 2, 50, 1).unwrap();
        let keys = keygen_ceremony(&pp, &mut rng);
        let ct = encrypt(&pp, &keys[0], &[3, -4], b"round-9").unwrap();
        let json = serde_json::to_value(&ct).unwrap();
        assert_eq!(json["party"], 1);
        assert!(json["label"].is_string());
        assert!(json["coords"].as_array().unwrap().iter().all(|c| c.is_string()));
        let back: Ciphertext = serde_json::from_value(json).unwrap();
        assert_eq!(ct, back);
        back.validate(&pp).unwrap();

        let weights = vec![1i64, 1];
        let tag = FusionTag::new(9, &weights);
        let share = key_der_share(&pp, &keys[0], &weights, &tag).unwrap();
        let sj = serde_json::to_value(&share).unwrap();
        assert_eq!(sj["party"], 1);
        assert!(sj["tag"].is_string());
        assert_eq!(sj["d"].as_array().unwrap().len(), 2);
        let share_back: KeyShare = serde_json::from_value(sj).unwrap();
        assert_eq!(share, share_back);
    }
}
