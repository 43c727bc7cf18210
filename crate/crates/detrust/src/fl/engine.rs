//! The aggregator side of a full run: registration, brokered key setup,
//! consensus negotiation, metered training rounds, and the final model
//! broadcast. One protocol driver serves both the in-process backend and
//! the TCP backend; misbehaving-aggregator scenarios plug in through
//! [`AggregatorHooks`] instead of a separate code path, so an attack run
//! exercises exactly the machinery an honest run does.

use crate::config::{ConfigError, DatasetSpec, RunConfig, RunMode};
use crate::dmcfe::{self, Ciphertext, DmcfeError, PublicParams};
use crate::dtc::{
    ConsensusDriver, DtcError, KeyFragmentMatrix, PartyFragments, PartyNegotiator, Phase,
    WeightPolicy,
};
use crate::encoding::{self, FusionMode, Weight};
use crate::fl::data::{load_csv, split_shards, synthetic_blobs, DataError, Dataset, DatasetShard};
use crate::fl::node::{parse, KeyServerNode, NodeError, PartyContext, PartyNode};
use crate::fl::trainer::LogisticModel;
use crate::group::GroupError;
use crate::metrics::MetricsRow;
use crate::participation::{FusionSpec, ParticipationError, ParticipationMatrix, Verdict};
use crate::transport::{
    payload, EntityId, Envelope, InteractionMeter, Link, MsgType, SharedMeter, TcpLink,
    TransportError,
};
use crate::{derive_seed, hex_digest, PartyId};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::net::{TcpListener, TcpStream};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Crypto(#[from] DmcfeError),
    #[error(transparent)]
    Consensus(#[from] DtcError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoding(#[from] encoding::EncodingError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Participation(#[from] ParticipationError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend thread panicked")]
    Thread,
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Replaces the named parties' ciphertexts in one round with the material
/// they sent in an earlier round, relabeled to look current.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayPlan {
    pub from_round: u32,
    pub in_round: u32,
    pub parties: Vec<PartyId>,
}

/// Aggregator-side behavior overrides. Default is an honest aggregator;
/// each field switches on one deviation. Fields that reach into party state
/// (pinned updates, disabled inspection, colluder leaks, ground-truth
/// capture) only work on the in-process backend.
#[derive(Debug, Clone, Default)]
pub struct AggregatorHooks {
    /// Skip negotiation and push this matrix as the proposal; it is also
    /// the matrix the aggregator decrypts against.
    pub proposal_override: Option<ParticipationMatrix>,
    /// Per-party view overrides: each listed party is shown its own matrix
    /// in both the proposal and the finalize step. Parties not listed see
    /// `proposal_override`.
    pub per_party_proposal: BTreeMap<u32, ParticipationMatrix>,
    /// Ciphertext replay substitution.
    pub replay: Option<ReplayPlan>,
    /// On mixed key-fragment tags, combine anyway instead of stopping.
    pub force_combine_on_mixed_tags: bool,
    /// Rewrite every ciphertext's label field to the expected one before
    /// decrypting, hiding staleness from the cheap equality check.
    pub forge_ciphertext_labels: bool,
    /// Parties whose plaintext updates are handed to the adversary.
    pub colluders: BTreeSet<u32>,
    /// Pinned update vectors replacing local training, per party.
    pub fixed_updates: BTreeMap<u32, Vec<f64>>,
    /// Parties that accept any proposal without inspecting it.
    pub disable_inspection: BTreeSet<u32>,
    /// Stop after this many training rounds even if the matrix has more.
    pub stop_after_round: Option<usize>,
    /// Capture every party's sent updates as the test oracle.
    pub capture_ground_truth: bool,
}

impl AggregatorHooks {
    fn overrides_consensus(&self) -> bool {
        self.proposal_override.is_some() || !self.per_party_proposal.is_empty()
    }

    fn needs_node_access(&self) -> bool {
        !self.colluders.is_empty()
            || !self.fixed_updates.is_empty()
            || !self.disable_inspection.is_empty()
            || self.capture_ground_truth
    }
}

/// Why a training round could not produce an aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FailureKind {
    /// Enrolled parties that sent nothing usable.
    QuorumMissing(Vec<PartyId>),
    /// Ciphertexts arrived from parties outside the round's support.
    UnexpectedSenders(Vec<PartyId>),
    /// Key fragments disagree on the round's fusion tag.
    MixedFusionTags,
    /// The bounded discrete log failed: stale or mismatched material.
    DlogFailure,
    /// A ciphertext's label field does not match the round's label.
    LabelMismatch(PartyId),
    Other(String),
}

fn classify(err: &DmcfeError) -> FailureKind {
    if err.is_dlog_failure() {
        return FailureKind::DlogFailure;
    }
    match err {
        DmcfeError::MixedFusionTag => FailureKind::MixedFusionTags,
        DmcfeError::LabelMismatch(p) => FailureKind::LabelMismatch(*p),
        other => FailureKind::Other(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunOutcome {
    Completed,
    /// Negotiation ended without agreement; verdict kinds keyed by party.
    ConsensusRejected { verdicts: BTreeMap<u32, String> },
    /// A training round aborted the run.
    RoundFailed { round: u32, failure: FailureKind },
}

/// Aggregator-visible audit record for one training round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub participants: Vec<PartyId>,
    /// Digests of the ciphertexts that entered fusion.
    pub ciphertext_ids: Vec<String>,
    /// Digest of the combined decryption key.
    pub key_id: String,
    pub model_digest: String,
    /// Real elapsed time; kept out of metrics.csv for reproducibility.
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub outcome: RunOutcome,
    pub final_model: Vec<f64>,
    pub final_accuracy: f64,
    pub metrics: Vec<MetricsRow>,
    pub meter: InteractionMeter,
    pub matrix: Option<ParticipationMatrix>,
    pub negotiation_rounds: u32,
    pub audit: Vec<RoundRecord>,
    /// Decoded per-round aggregates, exactly what the aggregator learns.
    pub aggregates: Vec<Vec<f64>>,
    /// Updates colluding parties handed over, keyed party -> round.
    pub colluder_leaks: BTreeMap<u32, BTreeMap<u32, Vec<f64>>>,
    /// Every party's true updates; only with `capture_ground_truth`, and
    /// never part of the aggregator-observable view.
    pub ground_truth: Option<BTreeMap<u32, BTreeMap<u32, Vec<f64>>>>,
}

impl RunOutput {
    /// Everything the aggregator observed, as one JSON document. Blindness
    /// checks scan this for party plaintext; leaks and ground truth are
    /// deliberately absent.
    pub fn aggregator_view_json(&self) -> String {
        let doc = serde_json::json!({
            "outcome": self.outcome,
            "final_model": self.final_model,
            "final_accuracy": self.final_accuracy,
            "metrics": self.metrics,
            "meter": self.meter,
            "matrix": self.matrix,
            "negotiation_rounds": self.negotiation_rounds,
            "audit": self.audit,
            "aggregates": self.aggregates,
        });
        serde_json::to_string_pretty(&doc).expect("view serializes")
    }
}

/// One message out, one message back, over whichever backend.
trait Cluster {
    fn exchange_party(&mut self, party: PartyId, env: &Envelope) -> Result<Envelope>;
    fn exchange_keyserver(&mut self, env: &Envelope) -> Result<Envelope>;
    /// Runs the party<->key-server deposit/bundle phase.
    fn run_party_keysetup(&mut self) -> Result<()>;
    /// Fire-and-forget to a party.
    fn cast_party(&mut self, party: PartyId, env: &Envelope) -> Result<()>;
    /// Direct node access; in-process backend only.
    fn node(&mut self, party: PartyId) -> Option<&mut PartyNode>;
    fn meter(&self) -> &SharedMeter;
}

struct SimCluster {
    nodes: Vec<PartyNode>,
    keyserver: KeyServerNode,
    meter: SharedMeter,
    ks_seq: u64,
}

impl SimCluster {
    fn new(nodes: Vec<PartyNode>) -> Self {
        SimCluster {
            nodes,
            keyserver: KeyServerNode::default(),
            meter: SharedMeter::default(),
            ks_seq: 0,
        }
    }

    fn node_mut(&mut self, party: PartyId) -> Result<&mut PartyNode> {
        self.nodes
            .get_mut(party.index())
            .ok_or_else(|| EngineError::Protocol(format!("no such party {party}")))
    }
}

impl Cluster for SimCluster {
    fn exchange_party(&mut self, party: PartyId, env: &Envelope) -> Result<Envelope> {
        let node = self.node_mut(party)?;
        let reply = node.handle(env)?.ok_or_else(|| {
            EngineError::Protocol(format!("{party} gave no reply to {:?}", env.msg_type))
        })?;
        self.meter.record_exchange(
            env.msg_type,
            env.sender,
            env.receiver,
            env.wire_bytes(),
            reply.wire_bytes(),
        );
        Ok(reply)
    }

    fn exchange_keyserver(&mut self, env: &Envelope) -> Result<Envelope> {
        let body: payload::KeySetupAnnounce = parse(env)?;
        let ack = self.keyserver.announce(&body);
        self.ks_seq += 1;
        let reply = Envelope {
            msg_type: MsgType::KeySetup,
            sender: EntityId::KeyServer,
            receiver: env.sender,
            seq: self.ks_seq,
            payload: serde_json::to_value(&ack).expect("ack serializes"),
        };
        self.meter.record_exchange(
            env.msg_type,
            env.sender,
            env.receiver,
            env.wire_bytes(),
            reply.wire_bytes(),
        );
        Ok(reply)
    }

    fn run_party_keysetup(&mut self) -> Result<()> {
        let mut deposits = Vec::new();
        for node in self.nodes.iter_mut() {
            let env = node.deposit();
            let body: payload::KeySetupDeposit = parse(&env)?;
            self.keyserver.record_deposit(&body)?;
            deposits.push((node.id(), env.wire_bytes()));
        }
        if !self.keyserver.complete() {
            return Err(EngineError::Protocol("key setup incomplete".into()));
        }
        for (party, deposit_bytes) in deposits {
            let env = self
                .keyserver
                .bundle_envelope(party)
                .expect("complete implies bundle");
            let bundle: payload::KeySetupBundle = parse(&env)?;
            self.node_mut(party)?.absorb_bundle(&bundle)?;
            self.meter.record_exchange(
                MsgType::KeySetup,
                EntityId::Party(party),
                EntityId::KeyServer,
                deposit_bytes,
                env.wire_bytes(),
            );
        }
        Ok(())
    }

    fn cast_party(&mut self, party: PartyId, env: &Envelope) -> Result<()> {
        let node = self.node_mut(party)?;
        if node.handle(env)?.is_some() {
            return Err(EngineError::Protocol(format!(
                "{party} replied to one-way {:?}",
                env.msg_type
            )));
        }
        self.meter.record_one_way(env.wire_bytes());
        Ok(())
    }

    fn node(&mut self, party: PartyId) -> Option<&mut PartyNode> {
        self.nodes.get_mut(party.index())
    }

    fn meter(&self) -> &SharedMeter {
        &self.meter
    }
}

struct TcpCluster {
    links: BTreeMap<u32, TcpLink>,
    keyserver: Option<TcpLink>,
    meter: SharedMeter,
}

impl TcpCluster {
    fn link(&mut self, party: PartyId) -> Result<&mut TcpLink> {
        self.links
            .get_mut(&party.0)
            .ok_or_else(|| EngineError::Protocol(format!("no link to {party}")))
    }
}

impl Cluster for TcpCluster {
    fn exchange_party(&mut self, party: PartyId, env: &Envelope) -> Result<Envelope> {
        let link = self.link(party)?;
        link.send(env)?;
        let reply = link.recv()?;
        self.meter.record_exchange(
            env.msg_type,
            env.sender,
            env.receiver,
            env.wire_bytes(),
            reply.wire_bytes(),
        );
        Ok(reply)
    }

    fn exchange_keyserver(&mut self, env: &Envelope) -> Result<Envelope> {
        let link = self
            .keyserver
            .as_mut()
            .ok_or_else(|| EngineError::Protocol("key-server link closed".into()))?;
        link.send(env)?;
        let reply = link.recv()?;
        self.meter.record_exchange(
            env.msg_type,
            env.sender,
            env.receiver,
            env.wire_bytes(),
            reply.wire_bytes(),
        );
        Ok(reply)
    }

    fn run_party_keysetup(&mut self) -> Result<()> {
        // The party threads deposit on their own and meter themselves.
        Ok(())
    }

    fn cast_party(&mut self, party: PartyId, env: &Envelope) -> Result<()> {
        let link = self.link(party)?;
        link.send(env)?;
        self.meter.record_one_way(env.wire_bytes());
        Ok(())
    }

    fn node(&mut self, _party: PartyId) -> Option<&mut PartyNode> {
        None
    }

    fn meter(&self) -> &SharedMeter {
        &self.meter
    }
}

/// Shared per-run derived state.
struct Setup {
    pp: PublicParams,
    shards: Vec<DatasetShard>,
    eval: Dataset,
    classes: usize,
    feature_dim: usize,
    locals: Vec<u32>,
    model_dim: usize,
}

fn build_datasets(cfg: &RunConfig) -> Result<(Vec<DatasetShard>, Dataset, usize, usize)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            features,
            samples_per_party,
            eval_samples,
            noise_std,
        } => {
            let train = synthetic_blobs(
                *classes,
                *features,
                samples_per_party * cfg.parties,
                *noise_std,
                derive_seed(cfg.seed, "dataset", 0),
            );
            let shards = split_shards(&train, cfg.parties, derive_seed(cfg.seed, "shards", 0))?;
            let eval = synthetic_blobs(
                *classes,
                *features,
                *eval_samples,
                *noise_std,
                derive_seed(cfg.seed, "eval", 0),
            );
            Ok((shards, eval, *classes, *features))
        }
        DatasetSpec::Csv { train, eval } => {
            let mut shards = Vec::new();
            let mut classes = 0usize;
            let mut dim = None;
            for (i, path) in train.iter().enumerate() {
                let ds = load_csv(path)?;
                classes = classes.max(ds.classes);
                match dim {
                    None => dim = Some(ds.dim()),
                    Some(d) if d != ds.dim() => {
                        return Err(EngineError::Protocol(format!(
                            "shard {} has {} features, others have {d}",
                            i + 1,
                            ds.dim()
                        )))
                    }
                    _ => {}
                }
                shards.push(DatasetShard {
                    party: PartyId::from_index(i),
                    data: ds,
                });
            }
            let mut eval = load_csv(eval)?;
            classes = classes.max(eval.classes);
            let dim = dim.ok_or_else(|| EngineError::Protocol("no training shards".into()))?;
            if eval.dim() != dim {
                return Err(EngineError::Protocol(format!(
                    "evaluation set has {} features, shards have {dim}",
                    eval.dim()
                )));
            }
            for s in &mut shards {
                s.data.classes = classes;
            }
            eval.classes = classes;
            Ok((shards, eval, classes, dim))
        }
    }
}

fn setup_common(cfg: &RunConfig, crypto: bool) -> Result<Setup> {
    cfg.validate()?;
    let group = if crypto {
        cfg.group.build()?
    } else {
        // Plaintext baselines never encrypt; a toy group satisfies the
        // parameter plumbing without the keygen cost.
        crate::group::GroupParams::generate_insecure(32, Some(cfg.group.seed))?
    };
    let pp = dmcfe::setup(
        group,
        cfg.parties,
        cfg.encoding.payload_bound(),
        cfg.encoding.max_weight_scale(cfg.fusion),
    )?;
    let (shards, eval, classes, feature_dim) = build_datasets(cfg)?;
    let locals = cfg.trust.expand(cfg.parties);
    let model_dim = LogisticModel::param_count(classes, feature_dim);
    Ok(Setup {
        pp,
        shards,
        eval,
        classes,
        feature_dim,
        locals,
        model_dim,
    })
}

fn build_nodes(cfg: &RunConfig, setup: &Setup, plaintext: bool) -> Vec<PartyNode> {
    setup
        .shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let ctx = PartyContext {
                id: PartyId::from_index(i),
                pp: setup.pp.clone(),
                encoding: cfg.encoding.clone(),
                fusion_mode: cfg.fusion,
                local_threshold: setup.locals[i],
                min_batch_size: cfg.trust.min_batch_size,
                policy: WeightPolicy::Consistent,
                hyper: cfg.hyper,
                dp: cfg.dp,
                master_seed: cfg.seed,
                classes: setup.classes,
                feature_dim: setup.feature_dim,
                plaintext_mode: plaintext,
            };
            PartyNode::new(ctx, shard.clone())
        })
        .collect()
}

/// The aggregator's base weights for weighted fusion; unit weights unless
/// sample counts are requested.
fn fusion_spec(cfg: &RunConfig, sample_counts: &[u64]) -> FusionSpec {
    match cfg.fusion {
        FusionMode::Average => FusionSpec::Average,
        FusionMode::Weighted => {
            let base = if cfg.weights_from_samples {
                sample_counts
                    .iter()
                    .map(|&c| Weight::from_integer(c.max(1) as i64))
                    .collect()
            } else {
                vec![Weight::from_integer(1); cfg.parties]
            };
            FusionSpec::Weighted(base)
        }
    }
}

fn verdict_from_wire(msg: &payload::VerdictMsg) -> Verdict {
    match msg.kind.as_str() {
        "accept" => Verdict::Accept,
        "violate-bp" => Verdict::ViolatesBatchPrivacy,
        "suggest" => Verdict::Suggest(
            msg.suggested_column
                .clone()
                .unwrap_or_default()
                .iter()
                .map(|(n, d)| Ratio::new(*n, (*d).max(1)))
                .collect(),
        ),
        _ => Verdict::Refuse,
    }
}

fn model_digest(params: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for p in params {
        bytes.extend_from_slice(&p.to_bits().to_be_bytes());
    }
    hex_digest(&bytes)
}

/// Aggregator protocol driver, generic over the backend.
struct Driver<'a, C: Cluster> {
    cfg: &'a RunConfig,
    hooks: &'a AggregatorHooks,
    pp: &'a PublicParams,
    cluster: C,
    seq: u64,
}

impl<'a, C: Cluster> Driver<'a, C> {
    fn envelope<T: Serialize>(&mut self, msg: MsgType, to: EntityId, body: &T) -> Envelope {
        self.seq += 1;
        Envelope {
            msg_type: msg,
            sender: EntityId::Aggregator,
            receiver: to,
            seq: self.seq,
            payload: serde_json::to_value(body).expect("payloads serialize"),
        }
    }

    fn query_party<T: Serialize>(
        &mut self,
        party: PartyId,
        msg: MsgType,
        body: &T,
    ) -> Result<Envelope> {
        let env = self.envelope(msg, EntityId::Party(party), body);
        self.cluster.exchange_party(party, &env)
    }

    /// Registration: one exchange per party, returning sample counts.
    fn register_all(&mut self, expected_dim: usize) -> Result<Vec<u64>> {
        let mut counts = Vec::with_capacity(self.cfg.parties);
        for i in 0..self.cfg.parties {
            let party = PartyId::from_index(i);
            let reply = self.query_party(party, MsgType::Register, &serde_json::Value::Null)?;
            let body: payload::Register = parse(&reply)?;
            if body.model_dim != expected_dim {
                return Err(EngineError::Protocol(format!(
                    "{party} registered dimension {}, expected {expected_dim}",
                    body.model_dim
                )));
            }
            counts.push(body.sample_count);
        }
        Ok(counts)
    }

    /// One aggregator<->key-server exchange announcing the federation.
    fn announce_keysetup(&mut self) -> Result<()> {
        let body = payload::KeySetupAnnounce {
            parties: (0..self.cfg.parties).map(PartyId::from_index).collect(),
            lambda: self.cfg.group.lambda,
            group_seed: self.cfg.group.seed,
        };
        let env = self.envelope(MsgType::KeySetup, EntityId::KeyServer, &body);
        let reply = self.cluster.exchange_keyserver(&env)?;
        let ack: payload::KeySetupAnnounceAck = parse(&reply)?;
        if !ack.ready {
            return Err(EngineError::Protocol("key server not ready".into()));
        }
        Ok(())
    }

    fn collect_thresholds(&mut self, consensus: &mut ConsensusDriver) -> Result<()> {
        for i in 0..self.cfg.parties {
            let party = PartyId::from_index(i);
            let reply = self.query_party(party, MsgType::DtcThreshold, &serde_json::Value::Null)?;
            let body: payload::Threshold = parse(&reply)?;
            consensus.record_threshold(body.party, body.t_local)?;
        }
        Ok(())
    }

    fn send_proposal(
        &mut self,
        party: PartyId,
        matrix: &ParticipationMatrix,
        global_threshold: u32,
        finalize: bool,
    ) -> Result<Envelope> {
        let body = payload::Propose {
            matrix: matrix.clone(),
            global_threshold,
            finalize,
        };
        self.query_party(party, MsgType::DtcPropose, &body)
    }

    /// The matrix shown to one party, honoring two-faced overrides.
    fn shown_matrix(&self, party: PartyId, base: &ParticipationMatrix) -> ParticipationMatrix {
        self.hooks
            .per_party_proposal
            .get(&party.0)
            .unwrap_or(base)
            .clone()
    }

    /// Negotiation plus finalize. Returns the working matrix and fragment
    /// store, or the rejection verdicts.
    #[allow(clippy::type_complexity)]
    fn run_consensus(
        &mut self,
        consensus: &mut ConsensusDriver,
    ) -> Result<std::result::Result<(ParticipationMatrix, KeyFragmentMatrix), BTreeMap<u32, String>>>
    {
        let n = self.cfg.parties;
        let global_threshold = consensus
            .trust()
            .expect("thresholds collected")
            .global_threshold;

        let working: ParticipationMatrix = if self.hooks.overrides_consensus() {
            let base = self.hooks.proposal_override.clone().ok_or_else(|| {
                EngineError::Protocol("per-party proposals need a base proposal override".into())
            })?;
            let mut verdicts = BTreeMap::new();
            let mut all_accept = true;
            for i in 0..n {
                let party = PartyId::from_index(i);
                let shown = self.shown_matrix(party, &base);
                let reply = self.send_proposal(party, &shown, global_threshold, false)?;
                let body: payload::VerdictMsg = parse(&reply)?;
                all_accept &= body.kind == "accept";
                verdicts.insert(party.0, body.kind);
            }
            if !all_accept {
                consensus.abort();
                return Ok(Err(verdicts));
            }
            base
        } else {
            loop {
                let proposal = consensus.propose()?.clone();
                let mut phase = Phase::AwaitVerdicts;
                for i in 0..n {
                    let party = PartyId::from_index(i);
                    let reply = self.send_proposal(party, &proposal, global_threshold, false)?;
                    let body: payload::VerdictMsg = parse(&reply)?;
                    phase = consensus.record_verdict(party, verdict_from_wire(&body))?;
                }
                match phase {
                    Phase::Finalizing => break consensus.agreed_matrix()?.clone(),
                    Phase::Proposing => continue,
                    other => {
                        return Err(EngineError::Protocol(format!(
                            "negotiation stuck in {other:?}"
                        )))
                    }
                }
            }
        };

        let mut fragments = KeyFragmentMatrix::default();
        for i in 0..n {
            let party = PartyId::from_index(i);
            let shown = self.shown_matrix(party, &working);
            let reply = self.send_proposal(party, &shown, global_threshold, true)?;
            let body: payload::Keyfrags = parse(&reply)?;
            fragments.insert(PartyFragments {
                party: body.party,
                matrix_digest: body.matrix_digest,
                fragments: body.fragments,
            })?;
        }
        if !fragments.is_complete(n) {
            return Err(EngineError::Protocol("missing key fragments".into()));
        }
        Ok(Ok((working, fragments)))
    }

    /// One training round: query everyone, fuse the replies.
    fn training_round(
        &mut self,
        round: usize,
        matrix: &ParticipationMatrix,
        fragments: &KeyFragmentMatrix,
        global: &[f64],
        stored_cts: &mut BTreeMap<u32, BTreeMap<u32, Ciphertext>>,
        leaks: &mut BTreeMap<u32, BTreeMap<u32, Vec<f64>>>,
    ) -> Result<std::result::Result<(Vec<f64>, RoundRecord), FailureKind>> {
        let started = Instant::now();
        let round_u32 = round as u32;
        let query = payload::TrainQuery {
            round: round_u32,
            global_model: global.to_vec(),
        };
        let mut cts: BTreeMap<u32, Ciphertext> = BTreeMap::new();
        for i in 0..self.cfg.parties {
            let party = PartyId::from_index(i);
            let reply = self.query_party(party, MsgType::TrainQuery, &query)?;
            let body: payload::TrainReply = parse(&reply)?;
            if let Some(ct) = body.ciphertext {
                cts.insert(party.0, ct);
            }
            if self.hooks.colluders.contains(&party.0) {
                if let Some(node) = self.cluster.node(party) {
                    if let Some(update) = node.sent_updates.get(&round_u32) {
                        leaks
                            .entry(party.0)
                            .or_default()
                            .insert(round_u32, update.clone());
                    }
                }
            }
        }

        let support = matrix.support(round);
        let missing: Vec<PartyId> = support
            .iter()
            .copied()
            .filter(|p| !cts.contains_key(&p.0))
            .collect();
        if !missing.is_empty() {
            return Ok(Err(FailureKind::QuorumMissing(missing)));
        }
        let extra: Vec<PartyId> = cts
            .keys()
            .map(|p| PartyId(*p))
            .filter(|p| !support.contains(p))
            .collect();
        if !extra.is_empty() {
            return Ok(Err(FailureKind::UnexpectedSenders(extra)));
        }

        let (scaled, weight_scale) =
            encoding::integerize_weights(&self.cfg.encoding, matrix.row(round), self.cfg.fusion)?;
        let tag = dmcfe::FusionTag::new(round_u32, &scaled);
        let label = tag.as_bytes().to_vec();

        stored_cts.insert(round_u32, cts.clone());
        if let Some(plan) = &self.hooks.replay {
            if plan.in_round == round_u32 {
                let bank = stored_cts.get(&plan.from_round).ok_or_else(|| {
                    EngineError::Protocol(format!(
                        "replay source round {} not recorded",
                        plan.from_round
                    ))
                })?;
                for p in &plan.parties {
                    let mut stale = bank
                        .get(&p.0)
                        .ok_or_else(|| {
                            EngineError::Protocol(format!("no stored ciphertext from {p}"))
                        })?
                        .clone();
                    stale.label = label.clone();
                    cts.insert(p.0, stale);
                }
            }
        }
        if self.hooks.forge_ciphertext_labels {
            for ct in cts.values_mut() {
                ct.label = label.clone();
            }
        }

        let shares = fragments.round_shares(round);
        let dk = match dmcfe::key_der_comb(self.pp, &shares) {
            Ok(dk) => dk,
            Err(DmcfeError::MixedFusionTag) if self.hooks.force_combine_on_mixed_tags => {
                dmcfe::force_combine(self.pp, &shares)
            }
            Err(other) => return Ok(Err(classify(&other))),
        };

        let ct_list: Vec<Ciphertext> = cts.values().cloned().collect();
        let ints = match dmcfe::decrypt(self.pp, &dk, &ct_list, &scaled, &label) {
            Ok(v) => v,
            Err(err) => return Ok(Err(classify(&err))),
        };
        let total_scale = match self.cfg.fusion {
            FusionMode::Average => weight_scale,
            FusionMode::Weighted => scaled.iter().map(|&w| w as u64).sum(),
        };
        let aggregate = encoding::decode(&self.cfg.encoding, &ints, total_scale);

        let record = RoundRecord {
            round: round_u32,
            participants: support,
            ciphertext_ids: ct_list
                .iter()
                .map(|c| hex_digest(&serde_json::to_vec(c).expect("ciphertexts serialize")))
                .collect(),
            key_id: hex_digest(
                format!("{}:{}", dk.d1.to_str_radix(16), dk.d2.to_str_radix(16)).as_bytes(),
            ),
            model_digest: model_digest(&aggregate),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        Ok(Ok((aggregate, record)))
    }

    fn broadcast<T: Serialize>(&mut self, msg: MsgType, body: &T) -> Result<()> {
        for i in 0..self.cfg.parties {
            let party = PartyId::from_index(i);
            let env = self.envelope(msg, EntityId::Party(party), body);
            self.cluster.cast_party(party, &env)?;
        }
        Ok(())
    }
}

fn capture_truth<C: Cluster>(
    cfg: &RunConfig,
    hooks: &AggregatorHooks,
    cluster: &mut C,
) -> Option<BTreeMap<u32, BTreeMap<u32, Vec<f64>>>> {
    if !hooks.capture_ground_truth {
        return None;
    }
    let mut truth = BTreeMap::new();
    for i in 0..cfg.parties {
        let party = PartyId::from_index(i);
        if let Some(node) = cluster.node(party) {
            truth.insert(party.0, node.sent_updates.clone());
        }
    }
    Some(truth)
}

/// Runs the full protocol over an already-built cluster.
fn drive<C: Cluster>(
    cfg: &RunConfig,
    hooks: &AggregatorHooks,
    setup: &Setup,
    cluster: C,
) -> Result<RunOutput> {
    let mut driver = Driver {
        cfg,
        hooks,
        pp: &setup.pp,
        cluster,
        seq: 0,
    };

    // Harness knobs that live party-side.
    for (p, update) in &hooks.fixed_updates {
        if let Some(node) = driver.cluster.node(PartyId(*p)) {
            node.fixed_update = Some(update.clone());
        }
    }
    for p in &hooks.disable_inspection {
        if let Some(node) = driver.cluster.node(PartyId(*p)) {
            node.inspection_disabled = true;
        }
    }

    // Announce before registering: on the socket backend parties block on
    // their key-material bundle, which the key server only releases once the
    // announce has fixed the roster. Registration replies would never come.
    driver.announce_keysetup()?;
    let sample_counts = driver.register_all(setup.model_dim)?;
    driver.cluster.run_party_keysetup()?;

    let spec = fusion_spec(cfg, &sample_counts);
    let mut consensus = ConsensusDriver::new(
        cfg.parties,
        cfg.rounds,
        spec,
        cfg.trust.min_batch_size,
        derive_seed(cfg.seed, "dtc", 0),
    );
    driver.collect_thresholds(&mut consensus)?;

    let (matrix, fragments) = match driver.run_consensus(&mut consensus)? {
        Ok(pair) => pair,
        Err(verdicts) => {
            let ground_truth = capture_truth(cfg, hooks, &mut driver.cluster);
            let meter = driver.cluster.meter().snapshot();
            return Ok(RunOutput {
                outcome: RunOutcome::ConsensusRejected { verdicts },
                final_model: vec![0.0; setup.model_dim],
                final_accuracy: 0.0,
                metrics: Vec::new(),
                meter,
                matrix: None,
                negotiation_rounds: consensus.negotiation_rounds_used().max(1),
                audit: Vec::new(),
                aggregates: Vec::new(),
                colluder_leaks: BTreeMap::new(),
                ground_truth,
            });
        }
    };
    if !hooks.overrides_consensus() {
        consensus.mark_done()?;
    }

    let rounds = matrix
        .rounds()
        .min(hooks.stop_after_round.unwrap_or(usize::MAX));
    let mut global = vec![0.0; setup.model_dim];
    let mut metrics = Vec::new();
    let mut audit = Vec::new();
    let mut aggregates = Vec::new();
    let mut stored_cts = BTreeMap::new();
    let mut leaks = BTreeMap::new();
    let mut outcome = RunOutcome::Completed;

    for round in 0..rounds {
        let step = driver.training_round(
            round,
            &matrix,
            &fragments,
            &global,
            &mut stored_cts,
            &mut leaks,
        )?;
        match step {
            Ok((aggregate, record)) => {
                global = aggregate.clone();
                aggregates.push(aggregate);
                audit.push(record);
                let model =
                    LogisticModel::from_params(setup.classes, setup.feature_dim, global.clone())
                        .map_err(NodeError::Trainer)?;
                let meter_now = driver.cluster.meter().snapshot();
                metrics.push(MetricsRow {
                    round: round as u32 + 1,
                    accuracy: model.accuracy(&setup.eval),
                    loss: model.loss(&setup.eval),
                    wall_ms: 0,
                    bytes_tx: meter_now.bytes_tx,
                    interactions: meter_now.table_total(),
                });
            }
            Err(failure) => {
                outcome = RunOutcome::RoundFailed {
                    round: round as u32,
                    failure,
                };
                driver.broadcast(
                    MsgType::Abort,
                    &payload::Abort {
                        reason: "aggregation failed".into(),
                    },
                )?;
                break;
            }
        }
    }

    if outcome == RunOutcome::Completed {
        driver.broadcast(
            MsgType::GlobalModel,
            &payload::GlobalModel {
                rounds_completed: rounds as u32,
                model: global.clone(),
            },
        )?;
    }

    let final_accuracy = metrics.last().map(|r| r.accuracy).unwrap_or(0.0);
    let ground_truth = capture_truth(cfg, hooks, &mut driver.cluster);
    let meter = driver.cluster.meter().snapshot();
    Ok(RunOutput {
        outcome,
        final_model: global,
        final_accuracy,
        metrics,
        meter,
        matrix: Some(matrix),
        negotiation_rounds: consensus.negotiation_rounds_used().max(1),
        audit,
        aggregates,
        colluder_leaks: leaks,
        ground_truth,
    })
}

/// Full encrypted run under the configured backend.
pub fn run_encrypted(cfg: &RunConfig, hooks: AggregatorHooks) -> Result<RunOutput> {
    match cfg.mode {
        RunMode::Sim => {
            let setup = setup_common(cfg, true)?;
            let nodes = build_nodes(cfg, &setup, false);
            drive(cfg, &hooks, &setup, SimCluster::new(nodes))
        }
        RunMode::Tcp => {
            if hooks.needs_node_access() {
                return Err(EngineError::Protocol(
                    "these hooks need the in-process backend".into(),
                ));
            }
            run_encrypted_tcp(cfg, hooks)
        }
    }
}

/// Plaintext federated-averaging baseline: same shards, seeds, and schedule
/// as the encrypted run, but no key server and no encryption. Registration
/// plus one training exchange per party per round is all the traffic.
pub fn run_plaintext(cfg: &RunConfig) -> Result<RunOutput> {
    let setup = setup_common(cfg, false)?;
    let nodes = build_nodes(cfg, &setup, true);
    let hooks = AggregatorHooks::default();
    let mut driver = Driver {
        cfg,
        hooks: &hooks,
        pp: &setup.pp,
        cluster: SimCluster::new(nodes),
        seq: 0,
    };
    let sample_counts = driver.register_all(setup.model_dim)?;

    // The schedule is negotiated with the same seed and policies as the
    // encrypted run, out-of-band, so the baseline trains on exactly the
    // same participation pattern.
    let spec = fusion_spec(cfg, &sample_counts);
    let mut consensus = ConsensusDriver::new(
        cfg.parties,
        cfg.rounds,
        spec,
        cfg.trust.min_batch_size,
        derive_seed(cfg.seed, "dtc", 0),
    );
    let mut negotiators: Vec<PartyNegotiator> = setup
        .locals
        .iter()
        .enumerate()
        .map(|(i, &t)| PartyNegotiator::new(PartyId::from_index(i), t, WeightPolicy::Consistent))
        .collect();
    let matrix = crate::dtc::negotiate(&mut consensus, &mut negotiators)?;
    let global_threshold = consensus
        .trust()
        .expect("thresholds collected")
        .global_threshold;
    for i in 0..cfg.parties {
        let party = PartyId::from_index(i);
        let node = driver.cluster.node(party).expect("in-process backend");
        node.adopt_matrix(&matrix, global_threshold)?;
    }

    let mut global = vec![0.0; setup.model_dim];
    let mut metrics = Vec::new();
    let mut aggregates = Vec::new();
    for round in 0..matrix.rounds() {
        let query = payload::TrainQuery {
            round: round as u32,
            global_model: global.clone(),
        };
        let mut sum = vec![0.0; setup.model_dim];
        for i in 0..cfg.parties {
            let party = PartyId::from_index(i);
            let reply = driver.query_party(party, MsgType::TrainQuery, &query)?;
            let body: payload::TrainReply = parse(&reply)?;
            if let Some(update) = body.plaintext {
                let w = matrix.weight(round, party);
                let w = *w.numer() as f64 / *w.denom() as f64;
                for (acc, u) in sum.iter_mut().zip(&update) {
                    *acc += w * u;
                }
            }
        }
        global = sum;
        let model = LogisticModel::from_params(setup.classes, setup.feature_dim, global.clone())
            .map_err(NodeError::Trainer)?;
        let meter_now = driver.cluster.meter().snapshot();
        metrics.push(MetricsRow {
            round: round as u32 + 1,
            accuracy: model.accuracy(&setup.eval),
            loss: model.loss(&setup.eval),
            wall_ms: 0,
            bytes_tx: meter_now.bytes_tx,
            interactions: meter_now.table_total(),
        });
        aggregates.push(global.clone());
    }

    driver.broadcast(
        MsgType::GlobalModel,
        &payload::GlobalModel {
            rounds_completed: matrix.rounds() as u32,
            model: global.clone(),
        },
    )?;

    let final_accuracy = metrics.last().map(|r| r.accuracy).unwrap_or(0.0);
    let meter = driver.cluster.meter().snapshot();
    Ok(RunOutput {
        outcome: RunOutcome::Completed,
        final_model: global,
        final_accuracy,
        metrics,
        meter,
        matrix: Some(matrix),
        negotiation_rounds: consensus.negotiation_rounds_used().max(1),
        audit: Vec::new(),
        aggregates,
        colluder_leaks: BTreeMap::new(),
        ground_truth: None,
    })
}

/// TCP backend: the key server and every party run on their own threads
/// with real sockets; the aggregator drives the same protocol over them.
fn run_encrypted_tcp(cfg: &RunConfig, hooks: AggregatorHooks) -> Result<RunOutput> {
    let setup = setup_common(cfg, true)?;
    let nodes = build_nodes(cfg, &setup, false);
    let meter = SharedMeter::default();
    let n = cfg.parties;

    let ks_listener = TcpListener::bind("127.0.0.1:0").map_err(TransportError::from)?;
    let ks_addr = ks_listener.local_addr().map_err(TransportError::from)?;
    let mut party_addrs = Vec::new();
    let mut party_listeners = Vec::new();
    for _ in 0..n {
        let l = TcpListener::bind("127.0.0.1:0").map_err(TransportError::from)?;
        party_addrs.push(l.local_addr().map_err(TransportError::from)?);
        party_listeners.push(l);
    }

    let mut handles = Vec::new();

    // Key server: the aggregator's announce and the party deposits race in
    // over n+1 connections in arbitrary order, so each first envelope is
    // dispatched by what it parses as. Deposits are buffered until the
    // announce has fixed the expected roster, then everyone gets a bundle.
    handles.push(std::thread::spawn(move || -> Result<()> {
        let mut ks = KeyServerNode::default();
        let mut announce_link = None;
        let mut deposits: Vec<(payload::KeySetupDeposit, TcpLink)> = Vec::new();
        for _ in 0..(n + 1) {
            let (stream, _) = ks_listener.accept().map_err(TransportError::from)?;
            let mut link = TcpLink::new(stream)?;
            let env = link.recv()?;
            if let Ok(body) = parse::<payload::KeySetupAnnounce>(&env) {
                let ack = ks.announce(&body);
                link.send(&Envelope {
                    msg_type: MsgType::KeySetup,
                    sender: EntityId::KeyServer,
                    receiver: env.sender,
                    seq: 1,
                    payload: serde_json::to_value(&ack).expect("ack serializes"),
                })?;
                announce_link = Some(link);
            } else {
                let body: payload::KeySetupDeposit = parse(&env)?;
                deposits.push((body, link));
            }
        }
        if announce_link.is_none() {
            return Err(EngineError::Protocol("no key-setup announce arrived".into()));
        }
        for (body, _) in &deposits {
            ks.record_deposit(body)?;
        }
        for (body, mut link) in deposits {
            let env = ks
                .bundle_envelope(body.party)
                .ok_or_else(|| EngineError::Protocol("bundle unavailable".into()))?;
            link.send(&env)?;
        }
        Ok(())
    }));

    // Parties: deposit with the key server, then answer aggregator queries
    // until the final model or an abort lands.
    for (node, listener) in nodes.into_iter().zip(party_listeners) {
        let meter = meter.clone();
        handles.push(std::thread::spawn(move || -> Result<()> {
            let mut node = node;
            let stream = TcpStream::connect(ks_addr).map_err(TransportError::from)?;
            let mut ks_link = TcpLink::new(stream)?;
            let deposit = node.deposit();
            let deposit_bytes = deposit.wire_bytes();
            ks_link.send(&deposit)?;
            let bundle_env = ks_link.recv()?;
            let bundle: payload::KeySetupBundle = parse(&bundle_env)?;
            node.absorb_bundle(&bundle)?;
            meter.record_exchange(
                MsgType::KeySetup,
                EntityId::Party(node.id()),
                EntityId::KeyServer,
                deposit_bytes,
                bundle_env.wire_bytes(),
            );
            drop(ks_link);

            let (stream, _) = listener.accept().map_err(TransportError::from)?;
            let mut link = TcpLink::new(stream)?;
            loop {
                let env = match link.recv() {
                    Ok(env) => env,
                    Err(TransportError::PeerDisconnected) => break,
                    Err(e) => return Err(e.into()),
                };
                let msg = env.msg_type;
                if let Some(reply) = node.handle(&env)? {
                    link.send(&reply)?;
                }
                if matches!(msg, MsgType::GlobalModel | MsgType::Abort) {
                    break;
                }
            }
            Ok(())
        }));
    }

    let ks_stream = TcpStream::connect(ks_addr).map_err(TransportError::from)?;
    let mut links = BTreeMap::new();
    for (i, addr) in party_addrs.iter().enumerate() {
        let stream = TcpStream::connect(addr).map_err(TransportError::from)?;
        links.insert(i as u32 + 1, TcpLink::new(stream)?);
    }
    let cluster = TcpCluster {
        links,
        keyserver: Some(TcpLink::new(ks_stream)?),
        meter,
    };

    let result = drive(cfg, &hooks, &setup, cluster);
    for h in handles {
        h.join().map_err(|_| EngineError::Thread)??;
    }
    result
}
