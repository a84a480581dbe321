//! Ledger-mediated pairing: the same five stages as the baseline protocol,
//! but every pairing-critical message travels as an envelope-encrypted,
//! consensus-committed block instead of a plaintext radio frame.
//!
//! The ledger overlay is modeled as an authenticated out-of-band channel:
//! routed messages never touch the baseline radio channel, so a radio
//! interceptor cannot read or rewrite them, and rewriting a committed block
//! instead breaks its hash and is caught by replica validation before the
//! receiver accepts anything. Post-encryption data exchange stays on the
//! baseline channel under the session key; the ledger only shields setup.
//!
//! Identity is bound to the member registry: routed traffic to a claimed
//! address is always encrypted to the key registered for that address, so a
//! device that cannot decrypt cannot participate. Combined with the
//! mutual-authentication default, this is what defeats impersonation in
//! secured mode. These guarantees are conditional on an honest registry;
//! membership onboarding itself is out of scope and configured statically.

use crate::adversary::{self, AttackKind, AttackOutcome, EavesdropInterceptor, KnobInterceptor};
use crate::crypto::{compute_sres, envelope_decrypt, envelope_encrypt, BdAddr, Nonce128, PublicKey};
use crate::ledger::{
    consensus_commit, propose_block, read_blocks, validate_chain, Chain, MemberRegistry,
    PayloadHeader,
};
use crate::netsim::{MessageKind, SimNetwork};
use crate::pairing::{
    AuthOutcome, BaselineTransport, Delivered, PairingError, PairingSession, PairingTransport,
    SessionOptions,
};
use std::collections::{BTreeMap, BTreeSet};

/// Configuration of a secured session.
#[derive(Clone, Debug)]
pub struct SecuredSessionConfig {
    /// Message kinds carried as ledger blocks. Data-exchange traffic is
    /// never routed; the set defaults to every pre-encryption exchange plus
    /// the setup payload.
    pub route_through_ledger: BTreeSet<MessageKind>,
    /// Encrypt routed traffic to the registry key of the claimed peer
    /// address (on by default; disabling it trusts keys announced in-band).
    pub bind_identity_to_member_key: bool,
    /// Run the reverse authentication leg as well.
    pub mutual_auth: bool,
    /// Replicas that withhold consensus votes, for fault-tolerance checks.
    pub faulty_voters: usize,
}

impl Default for SecuredSessionConfig {
    fn default() -> Self {
        SecuredSessionConfig {
            route_through_ledger: default_routed_kinds(),
            bind_identity_to_member_key: true,
            mutual_auth: true,
            faulty_voters: 0,
        }
    }
}

/// The default routed set: everything vulnerable before encryption starts.
pub fn default_routed_kinds() -> BTreeSet<MessageKind> {
    [
        MessageKind::InitKeyRand,
        MessageKind::LinkKeyMasked,
        MessageKind::AuthChallenge,
        MessageKind::AuthResponse,
        MessageKind::MutualAuthChallenge,
        MessageKind::MutualAuthResponse,
        MessageKind::EntropyProposal,
        MessageKind::EntropyAccept,
        MessageKind::EncryptionSetup,
        MessageKind::SetupPayload,
    ]
    .into_iter()
    .collect()
}

impl SecuredSessionConfig {
    pub fn validate(&self) -> Result<(), PairingError> {
        if self.route_through_ledger.contains(&MessageKind::Data)
            || self.route_through_ledger.contains(&MessageKind::Genesis)
        {
            return Err(PairingError::LedgerRejected);
        }
        Ok(())
    }
}

/// Deterministic mid-session corruption, for tamper-detection scenarios:
/// after the given number of commits, one payload bit of the newest block in
/// the receiver's replica is flipped.
#[derive(Clone, Copy, Debug)]
pub struct TamperInjection {
    pub after_commits: u64,
}

/// Index of `addr`'s replica: replicas are ordered like the registry.
pub fn replica_index(registry: &MemberRegistry, addr: &BdAddr) -> Option<usize> {
    registry.iter().position(|(id, _)| id == addr)
}

/// Encrypts `body` to `recipient_key`, proposes the block, and runs the
/// consensus commit across all replicas.
fn commit_routed(
    replicas: &mut [Chain],
    registry: &MemberRegistry,
    recipient_key: &PublicKey,
    header: PayloadHeader,
    body: &[u8],
    faulty_voters: usize,
) -> Result<(), PairingError> {
    let ciphertext = envelope_encrypt(body, recipient_key);
    let block = propose_block(&replicas[0], registry, header, ciphertext)
        .map_err(|_| PairingError::LedgerRejected)?;
    let outcome = consensus_commit(replicas, registry, &block, faulty_voters);
    if !outcome.committed {
        return Err(PairingError::LedgerRejected);
    }
    Ok(())
}

/// The receiver's side: validate the local replica, locate the addressed
/// block, and decrypt it.
fn read_routed(
    replica: &Chain,
    receiver: BdAddr,
    kind: MessageKind,
    seq: u64,
    private_key: &crate::crypto::PrivateKey,
) -> Result<Vec<u8>, PairingError> {
    let (valid, first_invalid) = validate_chain(replica);
    if !valid {
        return Err(PairingError::LedgerTampered(first_invalid.unwrap_or(0)));
    }
    let block = read_blocks(replica, Some(receiver))
        .into_iter()
        .find(|b| b.header.msg_kind == kind && b.header.seq == seq)
        .ok_or(PairingError::LedgerRejected)?;
    envelope_decrypt(&block.payload, private_key).map_err(|_| PairingError::LedgerDecryption)
}

/// [`PairingTransport`] that carries routed kinds as committed ledger blocks
/// and everything else over the baseline channel. Each routed message costs
/// one extra simulation round (commit, then read).
pub struct LedgerTransport<'a> {
    replicas: &'a mut Vec<Chain>,
    registry: &'a MemberRegistry,
    config: &'a SecuredSessionConfig,
    announced_keys: Option<&'a BTreeMap<BdAddr, PublicKey>>,
    tamper: Option<TamperInjection>,
    seq: u64,
    commits: u64,
    baseline: BaselineTransport,
}

impl<'a> LedgerTransport<'a> {
    pub fn new(
        replicas: &'a mut Vec<Chain>,
        registry: &'a MemberRegistry,
        config: &'a SecuredSessionConfig,
    ) -> LedgerTransport<'a> {
        LedgerTransport {
            replicas,
            registry,
            config,
            announced_keys: None,
            tamper: None,
            seq: 0,
            commits: 0,
            baseline: BaselineTransport,
        }
    }

    /// Keys trusted instead of the registry when identity binding is off.
    pub fn with_announced_keys(mut self, keys: &'a BTreeMap<BdAddr, PublicKey>) -> Self {
        self.announced_keys = Some(keys);
        self
    }

    pub fn with_tamper(mut self, tamper: TamperInjection) -> Self {
        self.tamper = Some(tamper);
        self
    }

    pub fn committed(&self) -> u64 {
        self.commits
    }

    fn recipient_key(&self, receiver: &BdAddr) -> Result<PublicKey, PairingError> {
        let key = if self.config.bind_identity_to_member_key {
            self.registry.public_key(receiver)
        } else {
            self.announced_keys
                .and_then(|keys| keys.get(receiver))
                .or_else(|| self.registry.public_key(receiver))
        };
        key.cloned().ok_or(PairingError::NotMember(*receiver))
    }
}

impl PairingTransport for LedgerTransport<'_> {
    fn deliver(
        &mut self,
        net: &mut SimNetwork,
        sender: BdAddr,
        receiver: BdAddr,
        kind: MessageKind,
        body: Vec<u8>,
    ) -> Result<Delivered, PairingError> {
        if !self.config.route_through_ledger.contains(&kind) {
            return self.baseline.deliver(net, sender, receiver, kind, body);
        }
        let recipient_key = self.recipient_key(&receiver)?;
        self.seq += 1;
        let header = PayloadHeader {
            sender,
            receiver,
            msg_kind: kind,
            seq: self.seq,
        };
        commit_routed(
            self.replicas,
            self.registry,
            &recipient_key,
            header,
            &body,
            self.config.faulty_voters,
        )?;
        self.commits += 1;

        let receiver_replica =
            replica_index(self.registry, &receiver).ok_or(PairingError::NotMember(receiver))?;
        if let Some(tamper) = self.tamper {
            if self.commits == tamper.after_commits {
                let replica = &mut self.replicas[receiver_replica];
                let last = replica.len() as usize - 1;
                if let Some(byte) = replica
                    .block_mut(last)
                    .and_then(|b| b.payload.first_mut())
                {
                    *byte ^= 0x01;
                }
            }
        }

        let private_key = net
            .device(&receiver)?
            .keypair
            .as_ref()
            .ok_or(PairingError::NotMember(receiver))?
            .private
            .clone();
        let body = read_routed(
            &self.replicas[receiver_replica],
            receiver,
            kind,
            self.seq,
            &private_key,
        )?;
        Ok(Delivered {
            body,
            on_baseline: false,
            rounds: 2,
        })
    }
}

/// Result of one secured session.
#[derive(Debug)]
pub struct SecuredRun {
    pub session: PairingSession,
    /// The payload exchanged over the baseline channel under the session key.
    pub received_payload: Vec<u8>,
    /// The setup payload as decrypted from its ledger block.
    pub setup_payload: Vec<u8>,
    /// Blocks committed by this session.
    pub committed_blocks: u64,
    /// Simulation rounds consumed, ledger commits included.
    pub rounds: u64,
}

/// Runs the five pairing stages with every routed message committed to the
/// ledger, exchanges the setup payload through a block, then exchanges the
/// data payload over the baseline channel under the derived session key.
pub fn secure_pairing(
    net: &mut SimNetwork,
    initiator: BdAddr,
    responder: BdAddr,
    replicas: &mut Vec<Chain>,
    registry: &MemberRegistry,
    config: &SecuredSessionConfig,
    options: &SessionOptions,
) -> Result<SecuredRun, PairingError> {
    secure_pairing_with(net, initiator, responder, replicas, registry, config, options, None)
}

#[allow(clippy::too_many_arguments)]
pub fn secure_pairing_with(
    net: &mut SimNetwork,
    initiator: BdAddr,
    responder: BdAddr,
    replicas: &mut Vec<Chain>,
    registry: &MemberRegistry,
    config: &SecuredSessionConfig,
    options: &SessionOptions,
    tamper: Option<TamperInjection>,
) -> Result<SecuredRun, PairingError> {
    config.validate()?;
    for addr in [initiator, responder] {
        if !registry.contains(&addr) {
            return Err(PairingError::NotMember(addr));
        }
    }

    let mut session = PairingSession::new(net, initiator, responder)?;
    let mut transport = LedgerTransport::new(replicas, registry, config);
    if let Some(t) = tamper {
        transport = transport.with_tamper(t);
    }

    session.run_init_key_phase_with(net, &mut transport)?;
    session.run_link_key_phase_with(net, &mut transport)?;
    session.bond_devices(net)?;
    if session.authenticate_with(net, &mut transport)? == AuthOutcome::Rejected {
        return Err(PairingError::AuthenticationRejected);
    }
    if config.mutual_auth
        && session.authenticate_reverse_with(net, &mut transport)? == AuthOutcome::Rejected
    {
        return Err(PairingError::AuthenticationRejected);
    }

    // The demo payload rides the ledger during setup, like the keys before
    // it; its delivery proves the envelope path end to end.
    let setup = transport.deliver(
        net,
        initiator,
        responder,
        MessageKind::SetupPayload,
        options.payload.clone(),
    )?;

    session.negotiate_entropy_with(
        net,
        &mut transport,
        options.initiator_proposal,
        options.responder_cap,
    )?;
    session.establish_encryption_with(net, &mut transport)?;
    let received = session.exchange_data_with(net, &mut transport, &options.payload)?;

    let committed_blocks = transport.committed();
    let rounds = session.rounds() + setup.rounds;
    Ok(SecuredRun {
        session,
        received_payload: received,
        setup_payload: setup.body,
        committed_blocks,
        rounds,
    })
}

/// KNOB against a secured session: the interceptor still watches the
/// baseline channel, but the negotiation rides the ledger, so nothing can be
/// rewritten and the data traffic is keyed at the honest entropy. The
/// offline search then faces the full key space and exhausts its budget.
pub fn attack_secured_knob(
    net: &mut SimNetwork,
    initiator: BdAddr,
    responder: BdAddr,
    replicas: &mut Vec<Chain>,
    registry: &MemberRegistry,
    config: &SecuredSessionConfig,
    options: &SessionOptions,
) -> (AttackOutcome, Option<SecuredRun>) {
    let (interceptor, state) = KnobInterceptor::new(1);
    net.install_interceptor(Box::new(interceptor));

    let run = match secure_pairing(net, initiator, responder, replicas, registry, config, options) {
        Ok(run) => run,
        Err(e) => {
            return (
                AttackOutcome::failure(AttackKind::Knob, 0, format!("secured session failed: {e}")),
                None,
            );
        }
    };

    let state = state.borrow();
    let outcome = match state.observed_data.first() {
        None => AttackOutcome::failure(AttackKind::Knob, 0, "no data ciphertext observed"),
        Some((counter, ciphertext)) => {
            let mut o = adversary::recover_key_from_traffic(ciphertext, *counter, &options.payload, 2);
            if !state.rewrote_proposal && !state.rewrote_accept {
                o.notes
                    .push_str("; negotiation never crossed the baseline channel");
            }
            o
        }
    };
    drop(state);
    (outcome, Some(run))
}

/// Offline PIN recovery against a secured session: the eavesdropper's
/// transcript holds only what crossed the baseline channel, which excludes
/// every field the attack needs.
#[allow(clippy::too_many_arguments)]
pub fn attack_secured_pincrack(
    net: &mut SimNetwork,
    initiator: BdAddr,
    responder: BdAddr,
    replicas: &mut Vec<Chain>,
    registry: &MemberRegistry,
    config: &SecuredSessionConfig,
    options: &SessionOptions,
    pin_digits: u32,
) -> (AttackOutcome, Option<SecuredRun>) {
    let (interceptor, transcript) = EavesdropInterceptor::new();
    net.install_interceptor(Box::new(interceptor));

    let run = match secure_pairing(net, initiator, responder, replicas, registry, config, options) {
        Ok(run) => run,
        Err(e) => {
            return (
                AttackOutcome::failure(
                    AttackKind::PinCrack,
                    0,
                    format!("secured session failed: {e}"),
                ),
                None,
            );
        }
    };
    let t = transcript.borrow().clone();
    (adversary::pin_crack(&t, responder, pin_digits), Some(run))
}

/// Impersonation against a secured session. The impersonator can propose
/// structurally valid blocks under the target's address, but routed traffic
/// to the target is encrypted to the registry key it does not hold, and the
/// mutual challenge demands an SRES it cannot compute.
pub fn attack_secured_bias(
    net: &mut SimNetwork,
    impersonator: BdAddr,
    target_addr: BdAddr,
    victim: BdAddr,
    replicas: &mut [Chain],
    registry: &MemberRegistry,
    config: &SecuredSessionConfig,
) -> AttackOutcome {
    attack_secured_bias_with_keys(
        net,
        impersonator,
        target_addr,
        victim,
        replicas,
        registry,
        config,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn attack_secured_bias_with_keys(
    net: &mut SimNetwork,
    impersonator: BdAddr,
    target_addr: BdAddr,
    victim: BdAddr,
    replicas: &mut [Chain],
    registry: &MemberRegistry,
    config: &SecuredSessionConfig,
    announced_keys: Option<&BTreeMap<BdAddr, PublicKey>>,
) -> AttackOutcome {
    let Some(bond_key) = net
        .device(&victim)
        .ok()
        .and_then(|d| d.bonded_key(&target_addr).copied())
    else {
        return AttackOutcome::failure(AttackKind::Bias, 0, "victim holds no bond for the target");
    };
    let Some(victim_key) = registry.public_key(&victim).cloned() else {
        return AttackOutcome::failure(AttackKind::Bias, 0, "victim not a registered member");
    };
    let victim_private = match net.device(&victim).ok().and_then(|d| d.keypair.clone()) {
        Some(pair) => pair.private,
        None => return AttackOutcome::failure(AttackKind::Bias, 0, "victim has no keypair"),
    };

    // Role grab: the impersonator commits a challenge block under the
    // target's name, encrypted to the victim's disclosed key.
    let au_m = net.device_mut(&impersonator).unwrap().draw_nonce();
    // Sequence space distinct from any honest session's.
    let mut seq = 1_000_000;
    let header = PayloadHeader {
        sender: target_addr,
        receiver: victim,
        msg_kind: MessageKind::AuthChallenge,
        seq,
    };
    if commit_routed(replicas, registry, &victim_key, header, &au_m.0, config.faulty_voters)
        .is_err()
    {
        return AttackOutcome::failure(AttackKind::Bias, 0, "challenge block rejected");
    }

    // The victim answers through the ledger, encrypting to the key bound to
    // the claimed address.
    let victim_replica = replica_index(registry, &victim).unwrap();
    let challenge = read_routed(
        &replicas[victim_replica],
        victim,
        MessageKind::AuthChallenge,
        seq,
        &victim_private,
    );
    let Ok(challenge) = challenge else {
        return AttackOutcome::failure(AttackKind::Bias, 0, "victim could not read the challenge");
    };
    let au_seen = match Nonce128::from_slice(&challenge) {
        Some(n) => n,
        None => return AttackOutcome::failure(AttackKind::Bias, 0, "malformed challenge"),
    };
    let sres_v = compute_sres(&au_seen, victim, &bond_key);
    let reply_key = if config.bind_identity_to_member_key {
        registry.public_key(&target_addr).cloned()
    } else {
        announced_keys
            .and_then(|k| k.get(&target_addr))
            .or_else(|| registry.public_key(&target_addr))
            .cloned()
    };
    let Some(reply_key) = reply_key else {
        return AttackOutcome::failure(AttackKind::Bias, 0, "no key for claimed address");
    };
    seq += 1;
    let header = PayloadHeader {
        sender: victim,
        receiver: target_addr,
        msg_kind: MessageKind::AuthResponse,
        seq,
    };
    if commit_routed(replicas, registry, &reply_key, header, &sres_v, config.faulty_voters)
        .is_err()
    {
        return AttackOutcome::failure(AttackKind::Bias, 0, "response block rejected");
    }

    if !config.mutual_auth {
        return AttackOutcome {
            attack_kind: AttackKind::Bias,
            succeeded: true,
            trials_used: 0,
            recovered_material: None,
            notes: "one-way secured flow never challenged the impersonator".to_string(),
        };
    }

    // Mutual leg: the victim challenges the claimed address.
    let au_v = net.device_mut(&victim).unwrap().draw_nonce();
    let expected = compute_sres(&au_v, target_addr, &bond_key);
    seq += 1;
    let header = PayloadHeader {
        sender: victim,
        receiver: target_addr,
        msg_kind: MessageKind::MutualAuthChallenge,
        seq,
    };
    if commit_routed(replicas, registry, &reply_key, header, &au_v.0, config.faulty_voters)
        .is_err()
    {
        return AttackOutcome::failure(AttackKind::Bias, 0, "mutual challenge block rejected");
    }

    // The impersonator cannot decrypt the challenge without the target's
    // private key; its only move is a guessed SRES.
    let guess = net.device_mut(&impersonator).unwrap().draw_bytes(4);
    seq += 1;
    let header = PayloadHeader {
        sender: target_addr,
        receiver: victim,
        msg_kind: MessageKind::MutualAuthResponse,
        seq,
    };
    if commit_routed(replicas, registry, &victim_key, header, &guess, config.faulty_voters)
        .is_err()
    {
        return AttackOutcome::failure(AttackKind::Bias, 0, "guess block rejected");
    }
    let answer = read_routed(
        &replicas[victim_replica],
        victim,
        MessageKind::MutualAuthResponse,
        seq,
        &victim_private,
    );

    let succeeded = answer.is_ok_and(|a| a == expected);
    AttackOutcome {
        attack_kind: AttackKind::Bias,
        succeeded,
        trials_used: 0,
        recovered_material: None,
        notes: "identity bound to registry key; mutual challenge required a real SRES".to_string(),
    }
}
