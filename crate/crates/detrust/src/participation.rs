//! Participation matrices and the structural checks parties run on them.
//!
//! A matrix assigns each training round a set of parties and exact rational
//! fusion weights. Before agreeing to one, a party verifies that every round
//! clears the global support threshold, that parties move in batches large
//! enough to hide any individual (batch privacy), and that its own weights
//! match what it expects; the rank test additionally proves no sequence of
//! round aggregates can be combined to isolate a single party's update.

use crate::encoding::{FusionMode, Weight};
use crate::PartyId;
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParticipationError {
    #[error("matrix must have at least one round and one party")]
    EmptyMatrix,
    #[error("row {row} has {got} entries, expected {expected}")]
    RaggedRow { row: usize, expected: usize, got: usize },
    #[error("negative weight at row {row}, party {party}")]
    NegativeWeight { row: usize, party: u32 },
    #[error("infeasible constraints: {0}")]
    InfeasibleConstraints(String),
    #[error("weighted fusion needs a strictly positive base weight per party")]
    InvalidBaseWeights,
}

pub type Result<T> = std::result::Result<T, ParticipationError>;

/// Per-federation trust parameters: each party's minimum acceptable round
/// support, the agreed global threshold (the maximum of those), and the
/// smallest batch of parties allowed to move together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustConfig {
    pub local_thresholds: Vec<u32>,
    pub global_threshold: u32,
    pub min_batch_size: u32,
}

impl TrustConfig {
    /// Honest construction: the global threshold is the max local one.
    pub fn new(local_thresholds: Vec<u32>, min_batch_size: u32) -> Self {
        let global_threshold = local_thresholds.iter().copied().max().unwrap_or(0);
        TrustConfig {
            local_thresholds,
            global_threshold,
            min_batch_size,
        }
    }

    pub fn uniform(parties: usize, local_threshold: u32, min_batch_size: u32) -> Self {
        Self::new(vec![local_threshold; parties], min_batch_size)
    }

    pub fn parties(&self) -> usize {
        self.local_thresholds.len()
    }

    pub fn local_for(&self, party: PartyId) -> u32 {
        self.local_thresholds[party.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_threshold < 2 || self.min_batch_size < 2 {
            return Err(ParticipationError::InfeasibleConstraints(
                "thresholds below 2 cannot hide any party".into(),
            ));
        }
        if (self.global_threshold as usize) > self.parties() {
            return Err(ParticipationError::InfeasibleConstraints(format!(
                "global threshold {} exceeds the {} registered parties",
                self.global_threshold,
                self.parties()
            )));
        }
        if (self.min_batch_size as usize) > self.parties() {
            return Err(ParticipationError::InfeasibleConstraints(format!(
                "batch size {} exceeds the {} registered parties",
                self.min_batch_size,
                self.parties()
            )));
        }
        Ok(())
    }
}

/// Rounds-by-parties matrix of exact rational fusion weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipationMatrix {
    rows: Vec<Vec<Weight>>,
    parties: usize,
}

impl ParticipationMatrix {
    pub fn new(rows: Vec<Vec<Weight>>) -> Result<Self> {
        let parties = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.is_empty() || parties == 0 {
            return Err(ParticipationError::EmptyMatrix);
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != parties {
                return Err(ParticipationError::RaggedRow {
                    row: i,
                    expected: parties,
                    got: row.len(),
                });
            }
            for (j, w) in row.iter().enumerate() {
                if *w < Weight::from_integer(0) {
                    return Err(ParticipationError::NegativeWeight {
                        row: i,
                        party: j as u32 + 1,
                    });
                }
            }
        }
        Ok(ParticipationMatrix { rows, parties })
    }

    pub fn rounds(&self) -> usize {
        self.rows.len()
    }

    pub fn parties(&self) -> usize {
        self.parties
    }

    pub fn row(&self, round: usize) -> &[Weight] {
        &self.rows[round]
    }

    pub fn rows(&self) -> &[Vec<Weight>] {
        &self.rows
    }

    pub fn weight(&self, round: usize, party: PartyId) -> Weight {
        self.rows[round][party.index()]
    }

    pub fn column(&self, party: PartyId) -> Vec<Weight> {
        self.rows.iter().map(|r| r[party.index()]).collect()
    }

    /// Parties with nonzero weight in a round.
    pub fn support(&self, round: usize) -> Vec<PartyId> {
        self.rows[round]
            .iter()
            .enumerate()
            .filter(|(_, w)| !w.numer().eq(&0))
            .map(|(j, _)| PartyId::from_index(j))
            .collect()
    }

    /// Round-participation fingerprint of one party.
    pub fn column_pattern(&self, party: PartyId) -> Vec<bool> {
        self.rows
            .iter()
            .map(|r| !r[party.index()].numer().eq(&0))
            .collect()
    }

    /// Canonical byte serialization; acceptance and fragment binding compare
    /// these bytes, never re-parsed structures.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.rows.len() * self.parties * 16);
        out.extend_from_slice(&(self.rows.len() as u32).to_be_bytes());
        out.extend_from_slice(&(self.parties as u32).to_be_bytes());
        for row in &self.rows {
            for w in row {
                let r = w.reduced();
                out.extend_from_slice(&r.numer().to_be_bytes());
                out.extend_from_slice(&r.denom().to_be_bytes());
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        crate::hex_digest(&self.canonical_bytes())
    }
}

impl Serialize for ParticipationMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let rows: Vec<Vec<(i64, i64)>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(|w| (*w.numer(), *w.denom())).collect())
            .collect();
        let mut st = s.serialize_struct("ParticipationMatrix", 3)?;
        st.serialize_field("m", &self.rows.len())?;
        st.serialize_field("n", &self.parties)?;
        st.serialize_field("rows", &rows)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for ParticipationMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            m: usize,
            n: usize,
            rows: Vec<Vec<(i64, i64)>>,
        }
        let raw = Raw::deserialize(d)?;
        if raw.rows.len() != raw.m {
            return Err(D::Error::custom(format!(
                "matrix declares {} rounds but has {} rows",
                raw.m,
                raw.rows.len()
            )));
        }
        let rows: Vec<Vec<Weight>> = raw
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&(num, den)| {
                        if den == 0 {
                            Err(D::Error::custom("weight denominator is zero"))
                        } else {
                            Ok(Ratio::new(num, den))
                        }
                    })
                    .collect()
            })
            .collect::<std::result::Result<_, _>>()?;
        let matrix = ParticipationMatrix::new(rows).map_err(D::Error::custom)?;
        if matrix.parties() != raw.n {
            return Err(D::Error::custom(format!(
                "matrix declares {} parties but rows have {}",
                raw.n,
                matrix.parties()
            )));
        }
        Ok(matrix)
    }
}

/// Batch privacy: group parties by identical round-participation patterns;
/// every group that participates anywhere must have at least `min_batch_size`
/// members, so each round's support is a union of whole batches and no
/// aggregate ever narrows down to fewer parties than a batch.
pub fn check_batch_privacy(matrix: &ParticipationMatrix, min_batch_size: u32) -> bool {
    use std::collections::HashMap;
    let mut class_sizes: HashMap<Vec<bool>, u32> = HashMap::new();
    for j in 0..matrix.parties() {
        let pattern = matrix.column_pattern(PartyId::from_index(j));
        *class_sizes.entry(pattern).or_insert(0) += 1;
    }
    class_sizes
        .iter()
        .filter(|(pattern, _)| pattern.iter().any(|&b| b))
        .all(|(_, &size)| size >= min_batch_size)
}

/// Rational reduced row echelon form; returns (rref rows, pivot columns).
fn rref(rows: &[Vec<Ratio<i128>>]) -> (Vec<Vec<Ratio<i128>>>, Vec<usize>) {
    let mut m: Vec<Vec<Ratio<i128>>> = rows.to_vec();
    let (nrows, ncols) = (m.len(), m.first().map(|r| r.len()).unwrap_or(0));
    let zero = Ratio::from_integer(0);
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..ncols {
        if r == nrows {
            break;
        }
        let Some(pivot_row) = (r..nrows).find(|&i| m[i][c] != zero) else {
            continue;
        };
        m.swap(r, pivot_row);
        let inv = m[r][c];
        for x in m[r].iter_mut() {
            *x /= inv;
        }
        let pivot = m[r].clone();
        for (i, row) in m.iter_mut().enumerate() {
            if i != r && row[c] != zero {
                let factor = row[c];
                for (x, p) in row.iter_mut().zip(&pivot) {
                    *x -= factor * *p;
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    m.truncate(r);
    (m, pivots)
}

/// Finds coefficients expressing party `j`'s unit vector as a combination of
/// the matrix's 0/1 support rows, if any exist. `Some` means round
/// aggregates can be linearly combined to isolate that party.
pub fn express_unit_vector(matrix: &ParticipationMatrix, party: PartyId) -> Option<Vec<Ratio<i64>>> {
    let m = matrix.rounds();
    let n = matrix.parties();
    // Augmented system: columns of the support matrix as equations over the
    // round-combination coefficients, with e_j on the right.
    let mut aug: Vec<Vec<Ratio<i128>>> = Vec::with_capacity(n);
    for col in 0..n {
        let mut row: Vec<Ratio<i128>> = (0..m)
            .map(|i| {
                if matrix.rows[i][col].numer().eq(&0) {
                    Ratio::from_integer(0)
                } else {
                    Ratio::from_integer(1)
                }
            })
            .collect();
        row.push(Ratio::from_integer(if col == party.index() { 1 } else { 0 }));
        aug.push(row);
    }
    let (reduced, pivots) = rref(&aug);
    // Inconsistent system: a pivot in the augmented column.
    if pivots.contains(&m) {
        return None;
    }
    let mut solution = vec![Ratio::from_integer(0i128); m];
    for (row, &pc) in reduced.iter().zip(&pivots) {
        solution[pc] = row[m];
    }
    Some(
        solution
            .iter()
            .map(|x| Ratio::new(*x.numer() as i64, *x.denom() as i64))
            .collect(),
    )
}

/// Returns every party whose unit vector lies in the span of the 0/1 support
/// rows, i.e. whose updates an aggregator could reconstruct by combining
/// round aggregates.
pub fn disaggregation_rank_test(matrix: &ParticipationMatrix) -> Vec<PartyId> {
    (0..matrix.parties())
        .map(PartyId::from_index)
        .filter(|&p| express_unit_vector(matrix, p).is_some())
        .collect()
}

/// A party's verdict on a proposed matrix. Only a suggestion carries data:
/// the column the party would accept instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Refuse,
    ViolatesBatchPrivacy,
    Suggest(Vec<Weight>),
}

impl Verdict {
    pub fn kind(&self) -> &'static str {
        match self {
            Verdict::Accept => "accept",
            Verdict::Refuse => "refuse",
            Verdict::ViolatesBatchPrivacy => "violate-bp",
            Verdict::Suggest(_) => "suggest",
        }
    }
}

/// The inspection every party runs before accepting a proposal.
///
/// Ordered checks: the announced global threshold must not undercut the
/// party's own; the matrix must preserve batch privacy; every round must
/// have support of at least the global threshold (refusal dominates); and
/// the party's own column must match its expectation, else it suggests the
/// expected column.
pub fn party_inspect(
    matrix: &ParticipationMatrix,
    party: PartyId,
    trust: &TrustConfig,
    expected_column: &[Weight],
) -> Verdict {
    if trust.global_threshold < trust.local_for(party) {
        return Verdict::Refuse;
    }
    if !check_batch_privacy(matrix, trust.min_batch_size) {
        return Verdict::ViolatesBatchPrivacy;
    }
    if (0..matrix.rounds()).any(|i| matrix.support(i).len() < trust.global_threshold as usize) {
        return Verdict::Refuse;
    }
    let mismatch =
        (0..matrix.rounds()).any(|i| matrix.weight(i, party) != expected_column[i]);
    if mismatch {
        Verdict::Suggest(expected_column.to_vec())
    } else {
        Verdict::Accept
    }
}

/// How round weights are derived from round supports.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionSpec {
    /// Every supporting party weighs 1/|support|.
    Average,
    /// Positive per-party base weights (e.g. sample counts), renormalized
    /// over each round's support.
    Weighted(Vec<Weight>),
}

impl FusionSpec {
    pub fn mode(&self) -> FusionMode {
        match self {
            FusionSpec::Average => FusionMode::Average,
            FusionSpec::Weighted(_) => FusionMode::Weighted,
        }
    }

    /// Builds a weight row from a support set.
    pub fn weigh(&self, parties: usize, support: &[PartyId]) -> Result<Vec<Weight>> {
        let mut row = vec![Weight::from_integer(0); parties];
        match self {
            FusionSpec::Average => {
                let share = Weight::new(1, support.len() as i64);
                for p in support {
                    row[p.index()] = share;
                }
            }
            FusionSpec::Weighted(base) => {
                if base.len() != parties
                    || base.iter().any(|w| *w <= Weight::from_integer(0))
                {
                    return Err(ParticipationError::InvalidBaseWeights);
                }
                let total: Weight = support.iter().map(|p| base[p.index()]).sum();
                for p in support {
                    row[p.index()] = base[p.index()] / total;
                }
            }
        }
        Ok(row)
    }
}

/// Builds a matrix that passes every inspection by construction: parties are
/// partitioned into floor(n / min_batch) batches of at least min_batch
/// members, and each round's support is a union of whole batches totalling at
/// least the global threshold. Deterministic in the seed.
pub fn propose_matrix(
    rounds: usize,
    parties: usize,
    trust: &TrustConfig,
    fusion: &FusionSpec,
    seed: u64,
) -> Result<ParticipationMatrix> {
    trust.validate()?;
    if trust.parties() != parties {
        return Err(ParticipationError::InfeasibleConstraints(format!(
            "trust config covers {} parties, federation has {}",
            trust.parties(),
            parties
        )));
    }
    if rounds == 0 {
        return Err(ParticipationError::EmptyMatrix);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<PartyId> = (0..parties).map(PartyId::from_index).collect();
    order.shuffle(&mut rng);

    let batch_size = trust.min_batch_size as usize;
    let num_batches = (parties / batch_size).max(1);
    let mut batches: Vec<Vec<PartyId>> = Vec::with_capacity(num_batches);
    for b in 0..num_batches {
        let start = b * batch_size;
        let end = if b == num_batches - 1 {
            parties
        } else {
            start + batch_size
        };
        batches.push(order[start..end].to_vec());
    }

    let mut rows = Vec::with_capacity(rounds);
    for round in 0..rounds {
        // Rotate the leading batch so every batch participates somewhere,
        // then draw extra batches in random order until the threshold holds.
        let lead = round % num_batches;
        let mut rest: Vec<usize> = (0..num_batches).filter(|&b| b != lead).collect();
        rest.shuffle(&mut rng);
        let mut chosen = vec![lead];
        let mut covered = batches[lead].len();
        for b in rest {
            if covered >= trust.global_threshold as usize {
                break;
            }
            chosen.push(b);
            covered += batches[b].len();
        }
        let mut support: Vec<PartyId> = chosen
            .iter()
            .flat_map(|&b| batches[b].iter().copied())
            .collect();
        support.sort();
        rows.push(fusion.weigh(parties, &support)?);
    }
    ParticipationMatrix::new(rows)
}
