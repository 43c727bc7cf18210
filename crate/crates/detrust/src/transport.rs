//! Message passing between the aggregator, the parties, and the setup
//! key-server, over two interchangeable backends: in-process channels for
//! deterministic simulation and TCP JSON-lines for real deployments. A
//! shared interaction meter counts request-response exchanges per channel,
//! keeping protocol-pattern traffic separate from consensus negotiation
//! chatter so the steady-state accounting stays exact.

use crate::PartyId;
use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::mpsc::{Receiver, Sender};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("malformed wire line: {line:?}")]
    ProtocolError { line: String },
    #[error("peer disconnected")]
    PeerDisconnected,
    #[error("channel closed")]
    ChannelClosed,
    #[error("message from {sender} regressed seq to {got}, last was {last}")]
    OutOfOrder { sender: String, got: u64, last: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TransportError>;

/// Network identity of a protocol participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityId {
    Aggregator,
    Party(PartyId),
    KeyServer,
}

impl std::fmt::Display for EntityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EntityId::Aggregator => write!(f, "A"),
            EntityId::Party(p) => write!(f, "{p}"),
            EntityId::KeyServer => write!(f, "K"),
        }
    }
}

impl std::str::FromStr for EntityId {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" => Ok(EntityId::Aggregator),
            "K" => Ok(EntityId::KeyServer),
            _ => s
                .strip_prefix('P')
                .and_then(|num| num.parse::<u32>().ok())
                .filter(|&n| n > 0)
                .map(|n| EntityId::Party(PartyId(n)))
                .ok_or_else(|| format!("unknown entity id {s:?}")),
        }
    }
}

impl Serialize for EntityId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MsgType {
    #[serde(rename = "REGISTER")]
    Register,
    #[serde(rename = "KEYSETUP")]
    KeySetup,
    #[serde(rename = "DTC_THRESHOLD")]
    DtcThreshold,
    #[serde(rename = "DTC_PROPOSE")]
    DtcPropose,
    #[serde(rename = "DTC_VERDICT")]
    DtcVerdict,
    #[serde(rename = "DTC_KEYFRAGS")]
    DtcKeyfrags,
    #[serde(rename = "TRAIN_QUERY")]
    TrainQuery,
    #[serde(rename = "TRAIN_REPLY")]
    TrainReply,
    #[serde(rename = "GLOBAL_MODEL")]
    GlobalModel,
    #[serde(rename = "ABORT")]
    Abort,
}

impl MsgType {
    /// Consensus negotiation traffic is metered apart from the steady-state
    /// protocol pattern.
    pub fn is_consensus(&self) -> bool {
        matches!(
            self,
            MsgType::DtcThreshold | MsgType::DtcPropose | MsgType::DtcVerdict | MsgType::DtcKeyfrags
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub sender: EntityId,
    pub receiver: EntityId,
    pub seq: u64,
    pub payload: serde_json::Value,
}

impl Envelope {
    pub fn wire_bytes(&self) -> usize {
        serde_json::to_string(self).map(|s| s.len() + 1).unwrap_or(0)
    }
}

/// Receiver-side guard for the per-sender monotone seq contract.
#[derive(Debug, Default)]
pub struct SeqTracker {
    last: BTreeMap<String, u64>,
}

impl SeqTracker {
    pub fn observe(&mut self, env: &Envelope) -> Result<()> {
        let key = env.sender.to_string();
        match self.last.get(&key) {
            Some(&last) if env.seq <= last => Err(TransportError::OutOfOrder {
                sender: key,
                got: env.seq,
                last,
            }),
            _ => {
                self.last.insert(key, env.seq);
                Ok(())
            }
        }
    }
}

/// Which leg of the protocol an exchange travels on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    AggregatorParty,
    AggregatorKeyServer,
    PartyKeyServer,
}

pub fn channel_between(a: EntityId, b: EntityId) -> Option<Channel> {
    use EntityId::*;
    match (a, b) {
        (Aggregator, Party(_)) | (Party(_), Aggregator) => Some(Channel::AggregatorParty),
        (Aggregator, KeyServer) | (KeyServer, Aggregator) => Some(Channel::AggregatorKeyServer),
        (Party(_), KeyServer) | (KeyServer, Party(_)) => Some(Channel::PartyKeyServer),
        _ => None,
    }
}

/// Exchange and byte counters, one interaction per request-response pair.
/// Steady-state protocol traffic lands in per-channel counters whose sum is
/// checked against [`expected_interactions`]; consensus negotiation runs a
/// separate counter; fire-and-forget broadcasts contribute bytes only.
#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq)]
pub struct InteractionMeter {
    pub aggregator_party: u64,
    pub aggregator_keyserver: u64,
    pub party_keyserver: u64,
    pub consensus: u64,
    pub bytes_tx: u64,
}

impl InteractionMeter {
    /// One request-response exchange: classify and count.
    pub fn record_exchange(
        &mut self,
        msg: MsgType,
        from: EntityId,
        to: EntityId,
        request_bytes: usize,
        response_bytes: usize,
    ) {
        self.bytes_tx += (request_bytes + response_bytes) as u64;
        if msg.is_consensus() {
            self.consensus += 1;
            return;
        }
        match channel_between(from, to) {
            Some(Channel::AggregatorParty) => self.aggregator_party += 1,
            Some(Channel::AggregatorKeyServer) => self.aggregator_keyserver += 1,
            Some(Channel::PartyKeyServer) => self.party_keyserver += 1,
            None => {}
        }
    }

    /// Broadcast without a reply: bytes move, no interaction.
    pub fn record_one_way(&mut self, bytes: usize) {
        self.bytes_tx += bytes as u64;
    }

    pub fn table_total(&self) -> u64 {
        self.aggregator_party + self.aggregator_keyserver + self.party_keyserver
    }

    pub fn merge(&mut self, other: &InteractionMeter) {
        self.aggregator_party += other.aggregator_party;
        self.aggregator_keyserver += other.aggregator_keyserver;
        self.party_keyserver += other.party_keyserver;
        self.consensus += other.consensus;
        self.bytes_tx += other.bytes_tx;
    }
}

/// Thread-shareable meter handle for concurrent senders.
#[derive(Debug, Clone, Default)]
pub struct SharedMeter(Arc<Mutex<InteractionMeter>>);

impl SharedMeter {
    pub fn record_exchange(
        &self,
        msg: MsgType,
        from: EntityId,
        to: EntityId,
        request_bytes: usize,
        response_bytes: usize,
    ) {
        self.0
            .lock()
            .unwrap()
            .record_exchange(msg, from, to, request_bytes, response_bytes);
    }

    pub fn record_one_way(&self, bytes: usize) {
        self.0.lock().unwrap().record_one_way(bytes);
    }

    pub fn snapshot(&self) -> InteractionMeter {
        self.0.lock().unwrap().clone()
    }
}

/// Steady-state exchanges of a full run: n registrations, one
/// aggregator-keyserver setup, n party-keyserver setups, and one training
/// exchange per party per round.
pub fn expected_interactions(m: u64, n: u64) -> u64 {
    m * n + 2 * n + 1
}

/// Plaintext federated averaging baseline: registrations plus training, no
/// key establishment at all.
pub fn general_fl_interactions(m: u64, n: u64) -> u64 {
    m * n + n
}

/// Reference pattern for a functional-encryption scheme whose aggregator
/// must fetch a fresh key from the authority every round.
pub fn hybrid_alpha_interactions(m: u64, n: u64) -> u64 {
    m * n + m + 2 * n + 1
}

/// Reference pattern for additively homomorphic schemes with a per-round
/// decryption round-trip through a crypto service.
pub fn additive_he_interactions(m: u64, n: u64) -> u64 {
    2 * m * n + n
}

/// Fractional interaction saving against the per-round-key reference.
pub fn reduction_vs_hybrid_alpha(m: u64, n: u64) -> f64 {
    let ours = expected_interactions(m, n) as f64;
    let theirs = hybrid_alpha_interactions(m, n) as f64;
    (theirs - ours) / theirs
}

/// Reliable in-order duplex link; both backends implement it.
pub trait Link: Send {
    fn send(&mut self, env: &Envelope) -> Result<()>;
    fn recv(&mut self) -> Result<Envelope>;
}

/// In-process backend: a pair of mpsc channels.
pub struct SimLink {
    tx: Sender<Envelope>,
    rx: Receiver<Envelope>,
}

/// Two connected in-process endpoints.
pub fn sim_pair() -> (SimLink, SimLink) {
    let (tx_a, rx_b) = std::sync::mpsc::channel();
    let (tx_b, rx_a) = std::sync::mpsc::channel();
    (
        SimLink { tx: tx_a, rx: rx_a },
        SimLink { tx: tx_b, rx: rx_b },
    )
}

impl Link for SimLink {
    fn send(&mut self, env: &Envelope) -> Result<()> {
        self.tx
            .send(env.clone())
            .map_err(|_| TransportError::ChannelClosed)
    }

    fn recv(&mut self) -> Result<Envelope> {
        self.rx.recv().map_err(|_| TransportError::ChannelClosed)
    }
}

/// TCP backend: one JSON document per newline-terminated UTF-8 line.
pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> Result<Self> {
        let writer = stream.try_clone()?;
        Ok(TcpLink {
            reader: BufReader::new(stream),
            writer,
        })
    }
}

impl Link for TcpLink {
    fn send(&mut self, env: &Envelope) -> Result<()> {
        let mut line = serde_json::to_string(env).expect("envelopes always serialize");
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Envelope> {
        let mut line = String::new();
        let read = self.reader.read_line(&mut line)?;
        if read == 0 {
            return Err(TransportError::PeerDisconnected);
        }
        let trimmed = line.trim_end_matches(['\n', '\r']);
        serde_json::from_str(trimmed).map_err(|_| TransportError::ProtocolError {
            line: trimmed.to_string(),
        })
    }
}

pub mod payload {
    //! Typed payload bodies for each message kind. Envelopes carry them as
    //! JSON values; these structs pin the schemas.

    use super::*;
    use crate::dmcfe::{Ciphertext, KeyShare};
    use crate::participation::ParticipationMatrix;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Register {
        pub party: PartyId,
        pub model_dim: usize,
        pub sample_count: u64,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct RegisterAck {
        pub accepted: bool,
    }

    /// Aggregator tells the key-server the federation shape (one exchange).
    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct KeySetupAnnounce {
        pub parties: Vec<PartyId>,
        pub lambda: u32,
        pub group_seed: u64,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct KeySetupAnnounceAck {
        pub ready: bool,
    }

    /// A party deposits its key-agreement public value; the reply carries
    /// every peer's value once all deposits are in.
    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct KeySetupDeposit {
        pub party: PartyId,
        pub dh_public: String,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct KeySetupBundle {
        pub publics: BTreeMap<u32, String>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Threshold {
        pub party: PartyId,
        pub t_local: u32,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Propose {
        pub matrix: ParticipationMatrix,
        pub global_threshold: u32,
        pub finalize: bool,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct VerdictMsg {
        pub party: PartyId,
        pub kind: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        pub suggested_column: Option<Vec<(i64, i64)>>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Keyfrags {
        pub party: PartyId,
        pub matrix_digest: String,
        pub fragments: Vec<KeyShare>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct TrainQuery {
        pub round: u32,
        pub global_model: Vec<f64>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct TrainReply {
        pub round: u32,
        pub party: PartyId,
        pub enrolled: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        pub ciphertext: Option<Ciphertext>,
        /// Plaintext-baseline mode only; never set in encrypted runs.
        #[serde(skip_serializing_if = "Option::is_none")]
        pub plaintext: Option<Vec<f64>>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct GlobalModel {
        pub rounds_completed: u32,
        pub model: Vec<f64>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Abort {
        pub reason: String,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn envelope(msg: MsgType, seq: u64) -> Envelope {
        Envelope {
            msg_type: msg,
            sender: EntityId::Party(PartyId(2)),
            receiver: EntityId::Aggregator,
            seq,
            payload: serde_json::json!({"x": 1}),
        }
    }

    #[test]
    fn sim_loopback_is_identity() {
        let (mut a, mut b) = sim_pair();
        let env = envelope(MsgType::Register, 1);
        a.send(&env).unwrap();
        assert_eq!(b.recv().unwrap(), env);
    }

    #[test]
    fn sim_delivery_is_fifo_per_sender() {
        let (mut a, mut b) = sim_pair();
        for seq in 1..=5 {
            a.send(&envelope(MsgType::TrainReply, seq)).unwrap();
        }
        for seq in 1..=5 {
            assert_eq!(b.recv().unwrap().seq, seq);
        }
    }

    #[test]
    fn seq_tracker_rejects_regressions() {
        let mut tracker = SeqTracker::default();
        tracker.observe(&envelope(MsgType::Register, 1)).unwrap();
        tracker.observe(&envelope(MsgType::Register, 2)).unwrap();
        let err = tracker.observe(&envelope(MsgType::Register, 2)).unwrap_err();
        assert!(matches!(err, TransportError::OutOfOrder { got: 2, last: 2, .. }));
    }

    #[test]
    fn tcp_round_trip_and_malformed_line() {
        use std::net::TcpListener;
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let stream = TcpStream::connect(addr).unwrap();
            let mut link = TcpLink::new(stream).unwrap();
            link.send(&envelope(MsgType::TrainQuery, 7)).unwrap();
            // Raw garbage straight onto the socket.
            link.writer.write_all(b"{not json}\n").unwrap();
        });
        let (stream, _) = listener.accept().unwrap();
        let mut link = TcpLink::new(stream).unwrap();
        assert_eq!(link.recv().unwrap().seq, 7);
        match link.recv() {
            Err(TransportError::ProtocolError { line }) => assert_eq!(line, "{not json}"),
            other => panic!("expected protocol error, got {other:?}"),
        }
        client.join().unwrap();
        assert!(matches!(link.recv(), Err(TransportError::PeerDisconnected)));
    }

    #[test]
    fn entity_ids_round_trip_as_strings() {
        for (id, s) in [
            (EntityId::Aggregator, "\"A\""),
            (EntityId::Party(PartyId(3)), "\"P3\""),
            (EntityId::KeyServer, "\"K\""),
        ] {
            assert_eq!(serde_json::to_string(&id).unwrap(), s);
            assert_eq!(serde_json::from_str::<EntityId>(s).unwrap(), id);
        }
        assert!(serde_json::from_str::<EntityId>("\"P0\"").is_err());
        assert!(serde_json::from_str::<EntityId>("\"Q1\"").is_err());
    }

    #[test]
    fn message_types_use_wire_names() {
        assert_eq!(
            serde_json::to_string(&MsgType::DtcKeyfrags).unwrap(),
            "\"DTC_KEYFRAGS\""
        );
        assert_eq!(
            serde_json::from_str::<MsgType>("\"GLOBAL_MODEL\"").unwrap(),
            MsgType::GlobalModel
        );
    }

    #[test]
    fn interaction_formulas_match_reference_points() {
        assert_eq!(expected_interactions(20, 5), 111);
        assert_eq!(expected_interactions(1, 1), 4);
        assert_eq!(general_fl_interactions(20, 5), 105);
        assert_eq!(hybrid_alpha_interactions(20, 5), 131);
        let r = reduction_vs_hybrid_alpha(20, 5);
        assert!((r - (131.0 - 111.0) / 131.0).abs() < 1e-12);
        assert!((r - 0.1527).abs() < 1e-3);
    }

    #[test]
    fn meter_separates_consensus_from_protocol_pattern() {
        let mut meter = InteractionMeter::default();
        let p = EntityId::Party(PartyId(1));
        meter.record_exchange(MsgType::Register, p, EntityId::Aggregator, 10, 5);
        meter.record_exchange(MsgType::KeySetup, EntityId::Aggregator, EntityId::KeyServer, 8, 4);
        meter.record_exchange(MsgType::KeySetup, p, EntityId::KeyServer, 6, 20);
        meter.record_exchange(MsgType::DtcPropose, EntityId::Aggregator, p, 50, 30);
        meter.record_exchange(MsgType::TrainQuery, EntityId::Aggregator, p, 100, 200);
        meter.record_one_way(40);

        assert_eq!(meter.aggregator_party, 2);
        assert_eq!(meter.aggregator_keyserver, 1);
        assert_eq!(meter.party_keyserver, 1);
        assert_eq!(meter.consensus, 1);
        assert_eq!(meter.table_total(), 4);
        assert_eq!(meter.bytes_tx, 10 + 5 + 8 + 4 + 6 + 20 + 50 + 30 + 100 + 200 + 40);
    }

    #[test]
    fn shared_meter_counts_across_threads() {
        let meter = SharedMeter::default();
        let handles: Vec<_> = (0..4)
            .map(|i| {
                let m = meter.clone();
                std::thread::spawn(move || {
                    m.record_exchange(
                        MsgType::TrainReply,
                        EntityId::Party(PartyId(i + 1)),
                        EntityId::Aggregator,
                        10,
                        10,
                    );
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let snap = meter.snapshot();
        assert_eq!(snap.aggregator_party, 4);
        assert_eq!(snap.bytes_tx, 80);
    }
}
