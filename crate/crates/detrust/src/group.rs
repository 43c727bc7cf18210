//! Safe-prime group arithmetic for the aggregation scheme.
//!
//! All ciphertext algebra happens in the subgroup of quadratic residues of
//! Z_p^* for a safe prime p = 2q + 1, which has prime order q. Labels are
//! mapped into the subgroup by hashing and squaring, and aggregate payloads
//! are recovered with a baby-step giant-step search over a bounded symmetric
//! exponent range.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use thiserror::Error;

/// Smallest modulus size accepted without the insecure test profile.
pub const MIN_SECURE_BITS: u32 = 2048;

/// Candidate budget for random safe-prime search before giving up.
const SAFE_PRIME_CANDIDATE_CAP: u64 = 4_000_000;

#[derive(Debug, Error)]
pub enum GroupError {
    #[error("{lambda}-bit modulus is below the {MIN_SECURE_BITS}-bit production floor; use the explicit insecure profile for test groups")]
    InsecureBitLength { lambda: u32 },
    #[error("bit length {0} is too small to host the subgroup")]
    BitLengthTooSmall(u32),
    #[error("safe-prime search exhausted {0} candidates")]
    SetupTimeout(u64),
    #[error("invalid group parameters: {0}")]
    InvalidParams(String),
    #[error("element is not in the quadratic-residue subgroup")]
    NotInSubgroup,
    #[error("no exponent in [-{bound}, {bound}] matches the target")]
    DlogNotFound { bound: u64 },
    #[error("discrete-log bound {bound} does not fit in the subgroup (order ~2^{order_bits})")]
    BoundTooLarge { bound: u64, order_bits: u64 },
}

pub type Result<T> = std::result::Result<T, GroupError>;

/// RFC 3526 group 14 modulus (2048-bit safe prime), hex encoded.
const RFC3526_2048_HEX: &[u8] = b"ffffffffffffffffc90fdaa22168c234c4c6628b80dc1cd129024e088a67cc74\
020bbea63b139b22514a08798e3404ddef9519b3cd3a431b302b0a6df25f1437\
4fe1356d6d51c245e485b576625e7ec6f44c42e9a637ed6b0bff5cb6f406b7ed\
ee386bfb5a899fa5ae9f24117c4b1fe649286651ece45b3dc2007cb8a163bf05\
98da48361c55d39a69163fa8fd24cf5f83655d23dca3ad961c62f356208552bb\
9ed529077096966d670c354e4abc9804f1746c08ca18217c32905e462e36ce3b\
e39e772c180e86039b2783a2ec07a28fb5c55df06f4c52c9de2bcbf695581718\
3995497cea956ae515d2261898fa051015728e5a8aacaa68ffffffffffffffff";

/// Safe-prime group description: p = 2q + 1 with g generating the
/// order-q subgroup of quadratic residues.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupParams {
    #[serde(with = "dec_string")]
    pub p: BigUint,
    #[serde(with = "dec_string")]
    pub q: BigUint,
    #[serde(with = "dec_string")]
    pub g: BigUint,
    pub lambda: u32,
}

/// Serializes big integers as decimal strings so parameter files stay
/// readable and language-agnostic.
pub mod dec_string {
    use num_bigint::BigUint;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_str_radix(10))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let raw = String::deserialize(d)?;
        BigUint::parse_bytes(raw.as_bytes(), 10)
            .ok_or_else(|| D::Error::custom(format!("not a decimal integer: {raw:?}")))
    }
}

impl GroupParams {
    /// Generates a fresh safe-prime group of at least `MIN_SECURE_BITS` bits.
    ///
    /// Random safe-prime search at production sizes is expensive; callers that
    /// just need a standard group should prefer [`GroupParams::rfc3526_2048`].
    pub fn generate(lambda: u32, seed: Option<u64>) -> Result<Self> {
        if lambda < MIN_SECURE_BITS {
            return Err(GroupError::InsecureBitLength { lambda });
        }
        Self::search(lambda, seed)
    }

    /// Generates a deliberately undersized group for tests and simulations.
    ///
    /// The caller owns the decision to run without cryptographic strength;
    /// nothing in this crate selects an insecure group implicitly.
    pub fn generate_insecure(lambda: u32, seed: Option<u64>) -> Result<Self> {
        if lambda < 8 {
            return Err(GroupError::BitLengthTooSmall(lambda));
        }
        Self::search(lambda, seed)
    }

    /// The 2048-bit MODP group from RFC 3526 with generator 2 (a quadratic
    /// residue for this modulus, so it generates the order-q subgroup).
    pub fn rfc3526_2048() -> Self {
        let hex: Vec<u8> = RFC3526_2048_HEX
            .iter()
            .copied()
            .filter(|b| !b.is_ascii_whitespace())
            .collect();
        let p = BigUint::parse_bytes(&hex, 16).expect("static modulus parses");
        let q = (&p - 1u32) >> 1;
        GroupParams {
            p,
            q,
            g: BigUint::from(2u32),
            lambda: 2048,
        }
    }

    fn search(lambda: u32, seed: Option<u64>) -> Result<Self> {
        let mut rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        let qbits = (lambda - 1) as u64;
        for _ in 0..SAFE_PRIME_CANDIDATE_CAP {
            let mut q = rng.gen_biguint(qbits);
            q.set_bit(qbits - 1, true);
            q.set_bit(0, true);
            if !is_probable_prime(&q) {
                continue;
            }
            let p: BigUint = (&q << 1) | BigUint::one();
            if !is_probable_prime(&p) {
                continue;
            }
            // Any non-unit square generates the whole order-q subgroup.
            let g = loop {
                let h = rng.gen_biguint_range(&BigUint::from(2u32), &(&p - 1u32));
                let g = h.modpow(&BigUint::from(2u32), &p);
                if !g.is_one() {
                    break g;
                }
            };
            return Ok(GroupParams { p, q, g, lambda });
        }
        Err(GroupError::SetupTimeout(SAFE_PRIME_CANDIDATE_CAP))
    }

    /// Re-checks every structural invariant, for parameters read from disk.
    pub fn validate(&self) -> Result<()> {
        if self.p.bits() != self.lambda as u64 {
            return Err(GroupError::InvalidParams(format!(
                "modulus has {} bits, expected {}",
                self.p.bits(),
                self.lambda
            )));
        }
        if (&self.q << 1) | BigUint::one() != self.p {
            return Err(GroupError::InvalidParams("p != 2q + 1".into()));
        }
        if !is_probable_prime(&self.p) || !is_probable_prime(&self.q) {
            return Err(GroupError::InvalidParams("p and q must both be prime".into()));
        }
        if self.g.is_one() || !self.in_subgroup(&self.g) {
            return Err(GroupError::InvalidParams(
                "generator must be a non-unit quadratic residue".into(),
            ));
        }
        Ok(())
    }

    pub fn in_subgroup(&self, v: &BigUint) -> bool {
        !v.is_zero() && v < &self.p && v.modpow(&self.q, &self.p).is_one()
    }

    /// Uniform scalar in [0, q).
    pub fn random_scalar<R: rand::Rng>(&self, rng: &mut R) -> BigUint {
        rng.gen_biguint_below(&self.q)
    }

    pub fn mul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.p
    }

    pub fn pow(&self, base: &BigUint, exp: &BigUint) -> BigUint {
        base.modpow(exp, &self.p)
    }

    /// Inverse of a subgroup element via its order: a^(q-1) = a^-1.
    pub fn inv(&self, a: &BigUint) -> BigUint {
        a.modpow(&(&self.q - 1u32), &self.p)
    }

    /// base^e for signed e, reduced into the exponent group Z_q.
    pub fn pow_signed(&self, base: &BigUint, e: i64) -> BigUint {
        base.modpow(&self.scalar_from_signed(e), &self.p)
    }

    /// Signed integer reduced into [0, q).
    pub fn scalar_from_signed(&self, e: i64) -> BigUint {
        if e >= 0 {
            BigUint::from(e as u64) % &self.q
        } else {
            let r = BigUint::from(e.unsigned_abs()) % &self.q;
            if r.is_zero() {
                r
            } else {
                &self.q - r
            }
        }
    }

    /// Hashes a label to a pair of independent subgroup elements.
    ///
    /// Each candidate digest is squared mod p, which lands in the
    /// quadratic-residue subgroup without revealing a discrete log
    /// relationship to the generator.
    pub fn hash_to_group(&self, label: &[u8]) -> (BigUint, BigUint) {
        (
            self.hash_one(label, b"qr-point-1"),
            self.hash_one(label, b"qr-point-2"),
        )
    }

    fn hash_one(&self, label: &[u8], domain: &[u8]) -> BigUint {
        let byte_len = ((self.p.bits() + 64) / 8 + 1) as usize;
        let two = BigUint::from(2u32);
        let span = &self.p - 3u32;
        for ctr in 0u64.. {
            let mut bytes = Vec::with_capacity(byte_len);
            let mut block = 0u32;
            while bytes.len() < byte_len {
                let mut h = Sha256::new();
                h.update(domain);
                h.update((label.len() as u64).to_be_bytes());
                h.update(label);
                h.update(ctr.to_be_bytes());
                h.update(block.to_be_bytes());
                bytes.extend_from_slice(&h.finalize());
                block += 1;
            }
            bytes.truncate(byte_len);
            // Candidate in [2, p-2]; p-1 squares to 1, so retry on that.
            let candidate = BigUint::from_bytes_be(&bytes) % &span + &two;
            let elem = candidate.modpow(&two, &self.p);
            if !elem.is_one() {
                return elem;
            }
        }
        unreachable!("counter loop always yields a non-unit square")
    }
}

/// A verified member of the quadratic-residue subgroup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupElement(BigUint);

impl GroupElement {
    pub fn new(params: &GroupParams, value: BigUint) -> Result<Self> {
        if params.in_subgroup(&value) {
            Ok(GroupElement(value))
        } else {
            Err(GroupError::NotInSubgroup)
        }
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn into_inner(self) -> BigUint {
        self.0
    }
}

/// Baby-step giant-step solver for exponents in [-bound, bound].
///
/// The table holds baby steps of g and giant steps multiply by
/// g^-ceil(sqrt(2*bound+1)); the instance is immutable after construction and
/// can be shared across decryptions of the same (params, bound) pair.
pub struct DlogSolver {
    params: GroupParams,
    bound: u64,
    stride: u64,
    table: HashMap<Vec<u8>, u64>,
    giant: BigUint,
    shift: BigUint,
}

impl DlogSolver {
    pub fn new(params: &GroupParams, bound: u64) -> Result<Self> {
        if bound > i64::MAX as u64 / 4 {
            return Err(GroupError::BoundTooLarge {
                bound,
                order_bits: params.q.bits(),
            });
        }
        let range = 2 * bound + 1;
        if BigUint::from(range) > params.q {
            return Err(GroupError::BoundTooLarge {
                bound,
                order_bits: params.q.bits(),
            });
        }
        let stride = (range as f64).sqrt().ceil() as u64;
        let mut table = HashMap::with_capacity(stride as usize);
        let mut acc = BigUint::one();
        for j in 0..stride {
            table.entry(acc.to_bytes_be()).or_insert(j);
            acc = params.mul(&acc, &params.g);
        }
        // acc is now g^stride; its inverse is the giant step.
        let giant = params.inv(&acc);
        let shift = params.pow(&params.g, &BigUint::from(bound));
        Ok(DlogSolver {
            params: params.clone(),
            bound,
            stride,
            table,
            giant,
            shift,
        })
    }

    pub fn bound(&self) -> u64 {
        self.bound
    }

    /// Finds x in [-bound, bound] with g^x = target, if it exists.
    pub fn solve(&self, target: &BigUint) -> Result<i64> {
        // Shift by g^bound so the search range becomes [0, 2*bound].
        let mut gamma = self.params.mul(target, &self.shift);
        let max_steps = (2 * self.bound) / self.stride + 1;
        for i in 0..=max_steps {
            if let Some(&j) = self.table.get(&gamma.to_bytes_be()) {
                let shifted = i * self.stride + j;
                if shifted <= 2 * self.bound {
                    return Ok(shifted as i64 - self.bound as i64);
                }
            }
            gamma = self.params.mul(&gamma, &self.giant);
        }
        Err(GroupError::DlogNotFound { bound: self.bound })
    }
}

/// One-shot bounded discrete log; builds a solver table per call.
pub fn dlog_bounded(params: &GroupParams, target: &BigUint, bound: u64) -> Result<i64> {
    DlogSolver::new(params, bound)?.solve(target)
}

/// Miller-Rabin primality check, deterministic for inputs below 2^64 and
/// using 40 digest-derived witnesses above.
pub fn is_probable_prime(n: &BigUint) -> bool {
    const SMALL_PRIMES: [u32; 30] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83,
        89, 97, 101, 103, 107, 109, 113,
    ];
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for sp in SMALL_PRIMES {
        let spb = BigUint::from(sp);
        if n == &spb {
            return true;
        }
        if (n % &spb).is_zero() {
            return false;
        }
    }

    let n_minus_1 = n - 1u32;
    let r = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> r;

    let witness_passes = |a: &BigUint| -> bool {
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            return true;
        }
        for _ in 1..r {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                return true;
            }
        }
        false
    };

    if n.bits() <= 64 {
        // This base set decides primality exactly for all 64-bit integers.
        for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
            let ab = BigUint::from(a);
            if &ab >= n {
                continue;
            }
            if !witness_passes(&ab) {
                return false;
            }
        }
        return true;
    }

    let span = n - 4u32;
    let n_bytes = n.to_bytes_be();
    for k in 0u32..40 {
        let byte_len = (n.bits() / 8 + 9) as usize;
        let mut bytes = Vec::with_capacity(byte_len);
        let mut block = 0u32;
        while bytes.len() < byte_len {
            let mut h = Sha256::new();
            h.update(b"mr-witness");
            h.update(&n_bytes);
            h.update(k.to_be_bytes());
            h.update(block.to_be_bytes());
            bytes.extend_from_slice(&h.finalize());
            block += 1;
        }
        bytes.truncate(byte_len);
        let a = BigUint::from_bytes_be(&bytes) % &span + 2u32;
        if !witness_passes(&a) {
            return false;
        }
    }
    true
}
