//! The party and key-server endpoints of the protocol. A party is a pure
//! responder after its one key-setup deposit: every handler consumes an
//! aggregator envelope and produces the reply, which lets the same node
//! drive both the in-process and the TCP backend. Everything a party signs
//! off on (thresholds, the matrix it accepted, its key fragments, its
//! training replies) is derived from its own state, never from aggregator
//! claims.

use crate::dmcfe::{self, DhKeypair, FusionTag, PartySecretKey, PublicParams};
use crate::dtc::{DtcError, PartyNegotiator, WeightPolicy};
use crate::encoding::{self, EncodingConfig, FusionMode};
use crate::fl::data::DatasetShard;
use crate::fl::dp::{apply_dp, DpConfig};
use crate::fl::trainer::{local_train, Hyperparams, LogisticModel};
use crate::participation::{ParticipationMatrix, TrustConfig, Verdict};
use crate::transport::{payload, Envelope, EntityId, MsgType};
use crate::{derive_seed, PartyId};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("unexpected payload for {0:?}: {1}")]
    BadPayload(MsgType, serde_json::Error),
    #[error("message {0:?} arrived before the node was ready for it")]
    OutOfPhase(MsgType),
    #[error("key setup bundle is missing peer {0}")]
    MissingPeer(PartyId),
    #[error("bad public value for peer {0}")]
    BadPeerValue(PartyId),
    #[error(transparent)]
    Dtc(#[from] DtcError),
    #[error(transparent)]
    Dmcfe(#[from] dmcfe::DmcfeError),
    #[error(transparent)]
    Encoding(#[from] encoding::EncodingError),
    #[error(transparent)]
    Trainer(#[from] crate::fl::trainer::TrainerError),
}

pub type Result<T> = std::result::Result<T, NodeError>;

/// Everything a party derives from the shared run configuration.
#[derive(Debug, Clone)]
pub struct PartyContext {
    pub id: PartyId,
    pub pp: PublicParams,
    pub encoding: EncodingConfig,
    pub fusion_mode: FusionMode,
    pub local_threshold: u32,
    pub min_batch_size: u32,
    pub policy: WeightPolicy,
    pub hyper: Hyperparams,
    pub dp: DpConfig,
    pub master_seed: u64,
    pub classes: usize,
    pub feature_dim: usize,
    /// Plaintext-baseline mode: reply with raw updates, no encryption.
    pub plaintext_mode: bool,
}

pub struct PartyNode {
    ctx: PartyContext,
    shard: DatasetShard,
    dh: DhKeypair,
    negotiator: PartyNegotiator,
    sk: Option<PartySecretKey>,
    agreed_matrix: Option<ParticipationMatrix>,
    final_model: Option<Vec<f64>>,
    seq: u64,
    /// Test/attack harness knob: a pinned update vector replacing training.
    pub fixed_update: Option<Vec<f64>>,
    /// Harness knob: accept any proposal without inspecting it. Models a
    /// party whose checks are absent, to show what the inspection prevents.
    pub inspection_disabled: bool,
    /// Harness-only capture of the exact vectors this node encrypted,
    /// keyed by round. Never serialized, never sent anywhere.
    pub sent_updates: BTreeMap<u32, Vec<f64>>,
}

impl PartyNode {
    pub fn new(ctx: PartyContext, shard: DatasetShard) -> Self {
        let mut dh_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(ctx.master_seed, "dh-keypair", ctx.id.0 as u64));
        let dh = DhKeypair::generate(&ctx.pp.group, &mut dh_rng);
        let negotiator = PartyNegotiator::new(ctx.id, ctx.local_threshold, ctx.policy.clone());
        PartyNode {
            dh,
            negotiator,
            shard,
            sk: None,
            agreed_matrix: None,
            final_model: None,
            seq: 0,
            fixed_update: None,
            inspection_disabled: false,
            sent_updates: BTreeMap::new(),
            ctx,
        }
    }

    pub fn id(&self) -> PartyId {
        self.ctx.id
    }

    pub fn sample_count(&self) -> u64 {
        self.shard.data.len() as u64
    }

    pub fn final_model(&self) -> Option<&[f64]> {
        self.final_model.as_deref()
    }

    pub fn agreed_matrix(&self) -> Option<&ParticipationMatrix> {
        self.agreed_matrix.as_ref()
    }

    /// The one exchange this node initiates: its key-agreement deposit.
    pub fn deposit(&mut self) -> Envelope {
        let body = payload::KeySetupDeposit {
            party: self.ctx.id,
            dh_public: self.dh.public.to_str_radix(10),
        };
        self.envelope(MsgType::KeySetup, EntityId::KeyServer, &body)
    }

    /// Completes key setup from the key-server bundle: derives one pairwise
    /// seed per peer and draws the encryption secrets.
    pub fn absorb_bundle(&mut self, bundle: &payload::KeySetupBundle) -> Result<()> {
        let mut pairwise = BTreeMap::new();
        for j in 1..=self.ctx.pp.parties as u32 {
            if j == self.ctx.id.0 {
                continue;
            }
            let peer = PartyId(j);
            let text = bundle
                .publics
                .get(&j)
                .ok_or(NodeError::MissingPeer(peer))?;
            let public = BigUint::parse_bytes(text.as_bytes(), 10)
                .ok_or(NodeError::BadPeerValue(peer))?;
            let seed = dmcfe::derive_pairwise_seed(
                &self.ctx.pp.group,
                &self.dh,
                &public,
                self.ctx.id,
                peer,
            );
            pairwise.insert(j, seed);
        }
        let mut sk_rng = ChaCha20Rng::seed_from_u64(derive_seed(
            self.ctx.master_seed,
            "party-secret",
            self.ctx.id.0 as u64,
        ));
        self.sk = Some(PartySecretKey {
            party: self.ctx.id,
            s1: self.ctx.pp.group.random_scalar(&mut sk_rng),
            s2: self.ctx.pp.group.random_scalar(&mut sk_rng),
            pairwise,
        });
        Ok(())
    }

    /// Dealer-mode shortcut used by harness scenarios that skip the broker.
    pub fn install_secret(&mut self, sk: PartySecretKey) {
        self.sk = Some(sk);
    }

    /// Adopts a schedule negotiated out-of-band, running the same inspection
    /// a proposal envelope would get. Plaintext baselines use this instead
    /// of wire negotiation.
    pub fn adopt_matrix(
        &mut self,
        matrix: &ParticipationMatrix,
        global_threshold: u32,
    ) -> Result<()> {
        let trust = self.inspection_trust(global_threshold);
        if self.negotiator.inspect(matrix, &trust) != Verdict::Accept {
            return Err(NodeError::Dtc(DtcError::RefusedMatrix));
        }
        self.agreed_matrix = Some(matrix.clone());
        Ok(())
    }

    pub fn secret(&self) -> Option<&PartySecretKey> {
        self.sk.as_ref()
    }

    fn envelope<T: serde::Serialize>(
        &mut self,
        msg: MsgType,
        to: EntityId,
        body: &T,
    ) -> Envelope {
        self.seq += 1;
        Envelope {
            msg_type: msg,
            sender: EntityId::Party(self.ctx.id),
            receiver: to,
            seq: self.seq,
            payload: serde_json::to_value(body).expect("payloads serialize"),
        }
    }

    /// Handles one aggregator envelope; `None` for fire-and-forget messages.
    pub fn handle(&mut self, env: &Envelope) -> Result<Option<Envelope>> {
        match env.msg_type {
            MsgType::Register => {
                let body = payload::Register {
                    party: self.ctx.id,
                    model_dim: LogisticModel::param_count(self.ctx.classes, self.ctx.feature_dim),
                    sample_count: self.sample_count(),
                };
                Ok(Some(self.envelope(MsgType::Register, env.sender, &body)))
            }
            MsgType::DtcThreshold => {
                let body = payload::Threshold {
                    party: self.ctx.id,
                    t_local: self.ctx.local_threshold,
                };
                Ok(Some(self.envelope(MsgType::DtcThreshold, env.sender, &body)))
            }
            MsgType::DtcPropose => {
                let body: payload::Propose = parse(env)?;
                if body.finalize {
                    self.handle_finalize(env.sender, &body)
                } else {
                    self.handle_proposal(env.sender, &body)
                }
            }
            MsgType::TrainQuery => {
                let body: payload::TrainQuery = parse(env)?;
                self.handle_train(env.sender, &body)
            }
            MsgType::GlobalModel => {
                let body: payload::GlobalModel = parse(env)?;
                self.final_model = Some(body.model);
                Ok(None)
            }
            MsgType::Abort => Ok(None),
            other => Err(NodeError::OutOfPhase(other)),
        }
    }

    fn inspection_trust(&self, announced_global: u32) -> TrustConfig {
        // A party only knows its own local threshold plus the announced
        // global one; batch size comes from the shared config.
        TrustConfig {
            local_thresholds: vec![self.ctx.local_threshold; self.ctx.pp.parties],
            global_threshold: announced_global,
            min_batch_size: self.ctx.min_batch_size,
        }
    }

    fn handle_proposal(
        &mut self,
        from: EntityId,
        body: &payload::Propose,
    ) -> Result<Option<Envelope>> {
        let verdict = if self.inspection_disabled {
            self.negotiator.force_accept(&body.matrix);
            Verdict::Accept
        } else {
            let trust = self.inspection_trust(body.global_threshold);
            self.negotiator.inspect(&body.matrix, &trust)
        };
        if verdict == Verdict::Accept {
            self.agreed_matrix = Some(body.matrix.clone());
        } else {
            self.agreed_matrix = None;
        }
        let reply = payload::VerdictMsg {
            party: self.ctx.id,
            kind: verdict.kind().to_string(),
            suggested_column: match verdict {
                Verdict::Suggest(col) => Some(
                    col.iter()
                        .map(|w| (*w.numer(), *w.denom()))
                        .collect(),
                ),
                _ => None,
            },
        };
        Ok(Some(self.envelope(MsgType::DtcVerdict, from, &reply)))
    }

    fn handle_finalize(
        &mut self,
        from: EntityId,
        body: &payload::Propose,
    ) -> Result<Option<Envelope>> {
        if self.inspection_disabled {
            self.negotiator.force_accept(&body.matrix);
        }
        let sk = self.sk.as_ref().ok_or(NodeError::OutOfPhase(MsgType::DtcPropose))?;
        let frags = self.negotiator.generate_fragments(
            &body.matrix,
            &self.ctx.pp,
            sk,
            &self.ctx.encoding,
            self.ctx.fusion_mode,
        )?;
        self.agreed_matrix = Some(body.matrix.clone());
        let reply = payload::Keyfrags {
            party: self.ctx.id,
            matrix_digest: frags.matrix_digest,
            fragments: frags.fragments,
        };
        Ok(Some(self.envelope(MsgType::DtcKeyfrags, from, &reply)))
    }

    /// Training seeds are derived per (master seed, party, round), so a
    /// plaintext reference run reproduces the exact same local updates.
    fn train_seed(&self, round: u32) -> u64 {
        derive_seed(
            self.ctx.master_seed,
            "local-train",
            (self.ctx.id.0 as u64) << 32 | round as u64,
        )
    }

    fn local_update(&mut self, round: u32, global: &[f64]) -> Result<Vec<f64>> {
        if let Some(pinned) = &self.fixed_update {
            return Ok(pinned.clone());
        }
        let start = LogisticModel::from_params(
            self.ctx.classes,
            self.ctx.feature_dim,
            global.to_vec(),
        )?;
        let trained = local_train(&start, &self.shard.data, &self.ctx.hyper, self.train_seed(round))?;
        let mut update = trained.params().to_vec();
        if self.ctx.dp.enabled {
            let mut dp_rng = ChaCha20Rng::seed_from_u64(derive_seed(
                self.ctx.master_seed,
                "dp-noise",
                (self.ctx.id.0 as u64) << 32 | round as u64,
            ));
            apply_dp(&self.ctx.dp, &mut update, &mut dp_rng);
        }
        Ok(update)
    }

    fn handle_train(
        &mut self,
        from: EntityId,
        body: &payload::TrainQuery,
    ) -> Result<Option<Envelope>> {
        let matrix = self
            .agreed_matrix
            .as_ref()
            .ok_or(NodeError::OutOfPhase(MsgType::TrainQuery))?;
        let round = body.round as usize;
        let enrolled = round < matrix.rounds()
            && !matrix.weight(round, self.ctx.id).numer().eq(&0);
        if !enrolled {
            let reply = payload::TrainReply {
                round: body.round,
                party: self.ctx.id,
                enrolled: false,
                ciphertext: None,
                plaintext: None,
            };
            return Ok(Some(self.envelope(MsgType::TrainReply, from, &reply)));
        }

        let update = self.local_update(body.round, &body.global_model)?;
        self.sent_updates.insert(body.round, update.clone());

        let reply = if self.ctx.plaintext_mode {
            payload::TrainReply {
                round: body.round,
                party: self.ctx.id,
                enrolled: true,
                ciphertext: None,
                plaintext: Some(update),
            }
        } else {
            let matrix = self.agreed_matrix.as_ref().unwrap();
            let (scaled, _) = encoding::integerize_weights(
                &self.ctx.encoding,
                matrix.row(round),
                self.ctx.fusion_mode,
            )?;
            let tag = FusionTag::new(body.round, &scaled);
            let encoded = encoding::encode(&self.ctx.encoding, &update);
            let sk = self.sk.as_ref().ok_or(NodeError::OutOfPhase(MsgType::TrainQuery))?;
            let ct = dmcfe::encrypt(&self.ctx.pp, sk, &encoded.values, tag.as_bytes())?;
            payload::TrainReply {
                round: body.round,
                party: self.ctx.id,
                enrolled: true,
                ciphertext: Some(ct),
                plaintext: None,
            }
        };
        Ok(Some(self.envelope(MsgType::TrainReply, from, &reply)))
    }
}

pub fn parse<T: serde::de::DeserializeOwned>(env: &Envelope) -> Result<T> {
    serde_json::from_value(env.payload.clone())
        .map_err(|e| NodeError::BadPayload(env.msg_type, e))
}

/// The setup key-server: learns the federation shape once, collects one
/// key-agreement deposit per party, and answers each with the full bundle
/// once all deposits are in. It holds no secrets and is torn down after
/// setup.
#[derive(Debug, Default)]
pub struct KeyServerNode {
    expected: Vec<PartyId>,
    deposits: BTreeMap<u32, String>,
    seq: u64,
}

impl KeyServerNode {
    pub fn announce(&mut self, body: &payload::KeySetupAnnounce) -> payload::KeySetupAnnounceAck {
        self.expected = body.parties.clone();
        payload::KeySetupAnnounceAck { ready: true }
    }

    pub fn record_deposit(&mut self, body: &payload::KeySetupDeposit) -> Result<()> {
        if !self.expected.contains(&body.party) {
            return Err(NodeError::OutOfPhase(MsgType::KeySetup));
        }
        self.deposits.insert(body.party.0, body.dh_public.clone());
        Ok(())
    }

    pub fn complete(&self) -> bool {
        !self.expected.is_empty() && self.deposits.len() == self.expected.len()
    }

    pub fn bundle(&self) -> Option<payload::KeySetupBundle> {
        self.complete().then(|| payload::KeySetupBundle {
            publics: self.deposits.clone(),
        })
    }

    pub fn bundle_envelope(&mut self, to: PartyId) -> Option<Envelope> {
        let bundle = self.bundle()?;
        self.seq += 1;
        Some(Envelope {
            msg_type: MsgType::KeySetup,
            sender: EntityId::KeyServer,
            receiver: EntityId::Party(to),
            seq: self.seq,
            payload: serde_json::to_value(&bundle).expect("bundle serializes"),
        })
    }
}
