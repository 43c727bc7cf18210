//! Trust-consensus negotiation between the aggregator and the parties.
//!
//! The aggregator never decides alone: it collects every party's local
//! support threshold, proposes a participation matrix under the maximum of
//! those, and gathers verdicts. Suggestions (a party wanting different
//! rounds) are merged into a fresh proposal; refusals trigger an honest
//! re-propose; the loop runs at most [`MAX_NEGOTIATION_ROUNDS`] times.
//! Once every party accepts, the agreed matrix is frozen byte-for-byte and
//! each party derives its key fragments bound to exactly those rounds and
//! weights, so a later swap of weights or rounds produces undecryptable
//! aggregates instead of a silent privacy loss.

use crate::dmcfe::{self, FusionTag, KeyShare, PartySecretKey, PublicParams};
use crate::encoding::{self, EncodingConfig};
use crate::participation::{
    check_batch_privacy, party_inspect, FusionSpec, ParticipationError, ParticipationMatrix,
    TrustConfig, Verdict,
};
use crate::PartyId;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const MAX_NEGOTIATION_ROUNDS: u32 = 10;

#[derive(Debug, Error)]
pub enum DtcError {
    #[error("no consensus after {0} negotiation rounds")]
    ConsensusTimeout(u32),
    #[error("parties refused the final proposal: {0:?}")]
    PartyRefusal(Vec<PartyId>),
    #[error("matrix differs from the accepted proposal")]
    RefusedMatrix,
    #[error("driver is in phase {phase:?}, cannot {action}")]
    PhaseViolation { phase: Phase, action: &'static str },
    #[error("duplicate input from {0}")]
    DuplicateInput(PartyId),
    #[error("{party} suggested a column of {got} rounds against a {rounds}-round proposal")]
    MalformedSuggestion {
        party: PartyId,
        got: usize,
        rounds: usize,
    },
    #[error("declines make the federation infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Participation(#[from] ParticipationError),
    #[error(transparent)]
    Encoding(#[from] encoding::EncodingError),
    #[error(transparent)]
    Dmcfe(#[from] dmcfe::DmcfeError),
}

pub type Result<T> = std::result::Result<T, DtcError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    CollectThresholds,
    Proposing,
    AwaitVerdicts,
    Finalizing,
    Done,
    Aborted,
}

/// How a party forms the column it expects for itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightPolicy {
    /// Trust the proposer: whatever rounds and weights it assigned.
    Consistent,
    /// Sit out specific training rounds; otherwise follow the proposal.
    DeclineRounds(BTreeSet<usize>),
}

impl WeightPolicy {
    fn expected_column(
        &self,
        proposal: &ParticipationMatrix,
        party: PartyId,
    ) -> Vec<crate::encoding::Weight> {
        let mut col = proposal.column(party);
        if let WeightPolicy::DeclineRounds(declined) = self {
            for &i in declined {
                if i < col.len() {
                    col[i] = crate::encoding::Weight::from_integer(0);
                }
            }
        }
        col
    }
}

/// Party-side negotiation state: inspects proposals against its own policy
/// and remembers exactly which bytes it accepted.
#[derive(Debug, Clone)]
pub struct PartyNegotiator {
    pub party: PartyId,
    pub local_threshold: u32,
    pub policy: WeightPolicy,
    accepted: Option<Vec<u8>>,
}

impl PartyNegotiator {
    pub fn new(party: PartyId, local_threshold: u32, policy: WeightPolicy) -> Self {
        PartyNegotiator {
            party,
            local_threshold,
            policy,
            accepted: None,
        }
    }

    /// Runs the full inspection and records the canonical bytes on accept.
    pub fn inspect(&mut self, proposal: &ParticipationMatrix, trust: &TrustConfig) -> Verdict {
        let expected = self.policy.expected_column(proposal, self.party);
        let verdict = party_inspect(proposal, self.party, trust, &expected);
        if verdict == Verdict::Accept {
            self.accepted = Some(proposal.canonical_bytes());
        } else {
            self.accepted = None;
        }
        verdict
    }

    pub fn has_accepted(&self) -> bool {
        self.accepted.is_some()
    }

    /// Records acceptance without inspecting. Exists so harness runs can
    /// model parties whose checks are switched off; never used by honest
    /// nodes.
    pub fn force_accept(&mut self, proposal: &ParticipationMatrix) {
        self.accepted = Some(proposal.canonical_bytes());
    }

    /// Key fragments for the finalized matrix: one fragment per round, each
    /// bound to that round's scaled weight vector through the fusion tag.
    /// Any byte-level difference from the accepted proposal is refused, so
    /// an aggregator cannot finalize one matrix after selling another.
    pub fn generate_fragments(
        &self,
        final_matrix: &ParticipationMatrix,
        pp: &PublicParams,
        sk: &PartySecretKey,
        cfg: &EncodingConfig,
        mode: crate::encoding::FusionMode,
    ) -> Result<PartyFragments> {
        match &self.accepted {
            Some(bytes) if *bytes == final_matrix.canonical_bytes() => {}
            _ => return Err(DtcError::RefusedMatrix),
        }
        let mut fragments = Vec::with_capacity(final_matrix.rounds());
        for i in 0..final_matrix.rounds() {
            let (scaled, _) = encoding::integerize_weights(cfg, final_matrix.row(i), mode)?;
            let tag = FusionTag::new(i as u32, &scaled);
            fragments.push(dmcfe::key_der_share(pp, sk, &scaled, &tag)?);
        }
        Ok(PartyFragments {
            party: self.party,
            matrix_digest: final_matrix.digest(),
            fragments,
        })
    }
}

/// One party's fragments for every round of the agreed matrix.
#[derive(Debug, Clone)]
pub struct PartyFragments {
    pub party: PartyId,
    pub matrix_digest: String,
    pub fragments: Vec<KeyShare>,
}

/// All parties' fragments, indexable by round.
#[derive(Debug, Clone, Default)]
pub struct KeyFragmentMatrix {
    per_party: BTreeMap<u32, PartyFragments>,
    rounds: usize,
}

impl KeyFragmentMatrix {
    pub fn insert(&mut self, frags: PartyFragments) -> Result<()> {
        if self.per_party.contains_key(&frags.party.0) {
            return Err(DtcError::DuplicateInput(frags.party));
        }
        self.rounds = self.rounds.max(frags.fragments.len());
        self.per_party.insert(frags.party.0, frags);
        Ok(())
    }

    pub fn parties(&self) -> usize {
        self.per_party.len()
    }

    pub fn is_complete(&self, parties: usize) -> bool {
        self.per_party.len() == parties
            && self.per_party.values().all(|f| f.fragments.len() == self.rounds)
    }

    /// Every party's fragment for one training round.
    pub fn round_shares(&self, round: usize) -> Vec<KeyShare> {
        self.per_party
            .values()
            .map(|f| f.fragments[round].clone())
            .collect()
    }
}

/// One negotiation round in the audit trail.
#[derive(Debug, Clone)]
pub struct NegotiationRecord {
    pub round: u32,
    pub proposal_digest: String,
    pub verdicts: BTreeMap<u32, &'static str>,
}

/// Aggregator-side negotiation state machine.
pub struct ConsensusDriver {
    parties: usize,
    rounds: usize,
    fusion: FusionSpec,
    min_batch: u32,
    seed: u64,
    phase: Phase,
    thresholds: BTreeMap<u32, u32>,
    trust: Option<TrustConfig>,
    proposal: Option<ParticipationMatrix>,
    verdicts: BTreeMap<u32, Verdict>,
    declines: BTreeMap<u32, BTreeSet<usize>>,
    negotiation_round: u32,
    saw_refusal: bool,
    pub history: Vec<NegotiationRecord>,
}

impl ConsensusDriver {
    pub fn new(parties: usize, rounds: usize, fusion: FusionSpec, min_batch: u32, seed: u64) -> Self {
        ConsensusDriver {
            parties,
            rounds,
            fusion,
            min_batch,
            seed,
            phase: Phase::CollectThresholds,
            thresholds: BTreeMap::new(),
            trust: None,
            proposal: None,
            verdicts: BTreeMap::new(),
            declines: BTreeMap::new(),
            negotiation_round: 0,
            saw_refusal: false,
            history: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn negotiation_rounds_used(&self) -> u32 {
        self.negotiation_round
    }

    pub fn trust(&self) -> Option<&TrustConfig> {
        self.trust.as_ref()
    }

    pub fn current_proposal(&self) -> Option<&ParticipationMatrix> {
        self.proposal.as_ref()
    }

    fn expect_phase(&self, want: Phase, action: &'static str) -> Result<()> {
        if self.phase != want {
            return Err(DtcError::PhaseViolation {
                phase: self.phase,
                action,
            });
        }
        Ok(())
    }

    /// Records one party's announced local threshold; moves to proposing
    /// once all are in, fixing the global threshold at their maximum.
    pub fn record_threshold(&mut self, party: PartyId, threshold: u32) -> Result<()> {
        self.expect_phase(Phase::CollectThresholds, "record a threshold")?;
        if self.thresholds.insert(party.0, threshold).is_some() {
            return Err(DtcError::DuplicateInput(party));
        }
        if self.thresholds.len() == self.parties {
            let locals: Vec<u32> = self.thresholds.values().copied().collect();
            let trust = TrustConfig::new(locals, self.min_batch);
            trust.validate()?;
            self.trust = Some(trust);
            self.phase = Phase::Proposing;
        }
        Ok(())
    }

    /// Builds the next proposal: the first honors only the thresholds, later
    /// ones also honor every decline gathered from suggestions.
    pub fn propose(&mut self) -> Result<&ParticipationMatrix> {
        self.expect_phase(Phase::Proposing, "propose")?;
        if self.negotiation_round >= MAX_NEGOTIATION_ROUNDS {
            self.phase = Phase::Aborted;
            return Err(DtcError::ConsensusTimeout(MAX_NEGOTIATION_ROUNDS));
        }
        self.negotiation_round += 1;
        let trust = self.trust.clone().expect("trust fixed before proposing");
        let matrix = merge_suggestions(
            self.rounds,
            self.parties,
            &trust,
            &self.fusion,
            self.seed.wrapping_add(self.negotiation_round as u64),
            &self.declines,
        )?;
        self.verdicts.clear();
        self.proposal = Some(matrix);
        self.phase = Phase::AwaitVerdicts;
        Ok(self.proposal.as_ref().unwrap())
    }

    /// Feeds one verdict back. Once all parties have answered the driver
    /// either enters Finalizing (all accepted) or loops back to Proposing
    /// with the gathered declines folded in.
    pub fn record_verdict(&mut self, party: PartyId, verdict: Verdict) -> Result<Phase> {
        self.expect_phase(Phase::AwaitVerdicts, "record a verdict")?;
        if self.verdicts.contains_key(&party.0) {
            return Err(DtcError::DuplicateInput(party));
        }
        if let Verdict::Suggest(expected) = &verdict {
            let proposal = self.proposal.as_ref().expect("verdicts follow a proposal");
            // Suggestions arrive off the wire; a wrong-length column is a
            // protocol violation, not an index panic.
            if expected.len() != proposal.rounds() {
                return Err(DtcError::MalformedSuggestion {
                    party,
                    got: expected.len(),
                    rounds: proposal.rounds(),
                });
            }
            let declined = self.declines.entry(party.0).or_default();
            for (i, expected_weight) in expected.iter().enumerate() {
                if !proposal.weight(i, party).numer().eq(&0) && expected_weight.numer().eq(&0) {
                    declined.insert(i);
                }
            }
        }
        if matches!(verdict, Verdict::Refuse | Verdict::ViolatesBatchPrivacy) {
            self.saw_refusal = true;
        }
        self.verdicts.insert(party.0, verdict);
        if self.verdicts.len() < self.parties {
            return Ok(self.phase);
        }

        let proposal = self.proposal.as_ref().expect("verdicts follow a proposal");
        self.history.push(NegotiationRecord {
            round: self.negotiation_round,
            proposal_digest: proposal.digest(),
            verdicts: self
                .verdicts
                .iter()
                .map(|(p, v)| (*p, v.kind()))
                .collect(),
        });

        if self.verdicts.values().all(|v| *v == Verdict::Accept) {
            self.phase = Phase::Finalizing;
        } else if self.negotiation_round >= MAX_NEGOTIATION_ROUNDS {
            self.phase = Phase::Aborted;
            let refusers = self
                .verdicts
                .iter()
                .filter(|(_, v)| **v != Verdict::Accept)
                .map(|(p, _)| PartyId(*p))
                .collect();
            return Err(DtcError::PartyRefusal(refusers));
        } else {
            self.phase = Phase::Proposing;
        }
        Ok(self.phase)
    }

    /// The matrix everyone accepted, available from Finalizing onward.
    pub fn agreed_matrix(&self) -> Result<&ParticipationMatrix> {
        match self.phase {
            Phase::Finalizing | Phase::Done => Ok(self.proposal.as_ref().unwrap()),
            _ => Err(DtcError::PhaseViolation {
                phase: self.phase,
                action: "read the agreed matrix",
            }),
        }
    }

    pub fn mark_done(&mut self) -> Result<()> {
        self.expect_phase(Phase::Finalizing, "finish")?;
        self.phase = Phase::Done;
        Ok(())
    }

    pub fn abort(&mut self) {
        self.phase = Phase::Aborted;
    }
}

/// Builds a proposal honoring both the trust constraints and every gathered
/// decline. Parties are grouped by identical decline sets; each group is cut
/// into batches of at least `min_batch`, and every round draws whole batches
/// from the groups available for it until the global threshold holds. A
/// group too small to form a batch cannot participate without becoming
/// identifiable, so its columns are zeroed instead.
pub fn merge_suggestions(
    rounds: usize,
    parties: usize,
    trust: &TrustConfig,
    fusion: &FusionSpec,
    seed: u64,
    declines: &BTreeMap<u32, BTreeSet<usize>>,
) -> Result<ParticipationMatrix> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if declines.is_empty() {
        return Ok(crate::participation::propose_matrix(
            rounds, parties, trust, fusion, seed,
        )?);
    }

    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let empty = BTreeSet::new();
    let mut groups: BTreeMap<&BTreeSet<usize>, Vec<PartyId>> = BTreeMap::new();
    for j in 0..parties {
        let p = PartyId::from_index(j);
        let declined = declines.get(&p.0).unwrap_or(&empty);
        groups.entry(declined).or_default().push(p);
    }

    // Cut each group into batches; undersized groups sit the matrix out.
    let batch_size = trust.min_batch_size as usize;
    let mut batches: Vec<(BTreeSet<usize>, Vec<PartyId>)> = Vec::new();
    for (declined, mut members) in groups {
        members.shuffle(&mut rng);
        if members.len() < batch_size {
            continue;
        }
        let num = members.len() / batch_size;
        for b in 0..num {
            let start = b * batch_size;
            let end = if b == num - 1 { members.len() } else { start + batch_size };
            batches.push((declined.clone(), members[start..end].to_vec()));
        }
    }

    let mut rows = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let available: Vec<usize> = (0..batches.len())
            .filter(|&b| !batches[b].0.contains(&round))
            .collect();
        let capacity: usize = available.iter().map(|&b| batches[b].1.len()).sum();
        if capacity < trust.global_threshold as usize {
            return Err(DtcError::Infeasible(format!(
                "round {round} has only {capacity} willing parties for threshold {}",
                trust.global_threshold
            )));
        }
        let lead = available[round % available.len()];
        let mut rest: Vec<usize> = available.iter().copied().filter(|&b| b != lead).collect();
        rest.shuffle(&mut rng);
        let mut chosen = vec![lead];
        let mut covered = batches[lead].1.len();
        for b in rest {
            if covered >= trust.global_threshold as usize {
                break;
            }
            chosen.push(b);
            covered += batches[b].1.len();
        }
        let mut support: Vec<PartyId> = chosen
            .iter()
            .flat_map(|&b| batches[b].1.iter().copied())
            .collect();
        support.sort();
        rows.push(fusion.weigh(parties, &support)?);
    }
    let matrix = ParticipationMatrix::new(rows)?;
    debug_assert!(check_batch_privacy(&matrix, trust.min_batch_size));
    Ok(matrix)
}

/// Drives a whole negotiation in memory: collect thresholds, loop proposals
/// and verdicts until everyone accepts or the round cap trips. Used by the
/// local simulation; the networked engine replays the same transitions over
/// the wire.
pub fn negotiate(
    driver: &mut ConsensusDriver,
    negotiators: &mut [PartyNegotiator],
) -> Result<ParticipationMatrix> {
    for neg in negotiators.iter() {
        driver.record_threshold(neg.party, neg.local_threshold)?;
    }
    loop {
        driver.propose()?;
        let proposal = driver.current_proposal().unwrap().clone();
        let trust = driver.trust().unwrap().clone();
        let mut phase = driver.phase();
        for neg in negotiators.iter_mut() {
            let verdict = neg.inspect(&proposal, &trust);
            phase = driver.record_verdict(neg.party, verdict)?;
        }
        match phase {
            Phase::Finalizing => return Ok(driver.agreed_matrix()?.clone()),
            Phase::Proposing => continue,
            other => {
                return Err(DtcError::PhaseViolation {
                    phase: other,
                    action: "continue negotiating",
                })
            }
        }
    }
}
