//! Scenario runner and report emitter: every claim the simulator makes is
//! reproducible as a seeded batch run with a structured report.
//!
//! A scenario executes `runs` independent simulations at seeds `seed + i`.
//! All per-run randomness (addresses, PIN, device nonce streams, RSA keys)
//! derives from the run seed through labeled sub-seeds, so a report is a
//! pure function of its config: re-running a config reproduces the report
//! byte for byte, timing aside. Runs within a batch execute in parallel and
//! records are ordered by run index regardless of completion order.
//!
//! The structured report format is JSON with the field names frozen in
//! [`ScenarioReport`] and friends; the human format is line-oriented.

use crate::adversary::{
    bias_attack, knob_attack, link_key_from_pin, pin_crack, AttackOutcome, EavesdropInterceptor,
};
use crate::crypto::{generate_keypair, hash, AsymKeyPair, BdAddr};
use crate::exec;
use crate::ledger::{
    consensus_commit, propose_block, validate_chain, Block, Chain, MemberRegistry, PayloadHeader,
};
use crate::netsim::{DeviceIdentity, MessageKind, Role, SimNetwork};
use crate::pairing::{run_full_session, PairingSession, SessionKeys, SessionOptions, Stage};
use crate::secured::{
    attack_secured_bias, attack_secured_knob, attack_secured_pincrack, secure_pairing,
    SecuredSessionConfig,
};
use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// Bit flips per tamper-ledger run.
pub const TAMPER_FLIPS: u32 = 1_000;

/// Blocks committed to the tamper-ledger fixture chain.
const TAMPER_CHAIN_BLOCKS: u64 = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("report parse error: {0}")]
    Report(String),
}

/// The closed set of runnable scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    PairBaseline,
    PairSecured,
    AttackKnob,
    AttackBias,
    AttackPincrack,
    AttackKnobSecured,
    AttackBiasSecured,
    AttackPincrackSecured,
    TamperLedger,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 9] = [
        ScenarioKind::PairBaseline,
        ScenarioKind::PairSecured,
        ScenarioKind::AttackKnob,
        ScenarioKind::AttackBias,
        ScenarioKind::AttackPincrack,
        ScenarioKind::AttackKnobSecured,
        ScenarioKind::AttackBiasSecured,
        ScenarioKind::AttackPincrackSecured,
        ScenarioKind::TamperLedger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::PairBaseline => "pair-baseline",
            ScenarioKind::PairSecured => "pair-secured",
            ScenarioKind::AttackKnob => "attack-knob",
            ScenarioKind::AttackBias => "attack-bias",
            ScenarioKind::AttackPincrack => "attack-pincrack",
            ScenarioKind::AttackKnobSecured => "attack-knob-secured",
            ScenarioKind::AttackBiasSecured => "attack-bias-secured",
            ScenarioKind::AttackPincrackSecured => "attack-pincrack-secured",
            ScenarioKind::TamperLedger => "tamper-ledger",
        }
    }

    pub fn parse(s: &str) -> Option<ScenarioKind> {
        ScenarioKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether runs of this kind build a ledger.
    pub fn uses_ledger(self) -> bool {
        matches!(
            self,
            ScenarioKind::PairSecured
                | ScenarioKind::AttackKnobSecured
                | ScenarioKind::AttackBiasSecured
                | ScenarioKind::AttackPincrackSecured
                | ScenarioKind::TamperLedger
        )
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_seed() -> u64 {
    1
}
fn default_runs() -> u32 {
    1
}
fn default_pin_digits() -> u8 {
    4
}
fn default_replicas() -> u32 {
    5
}

/// One scenario invocation, fully determining its report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: u32,
    #[serde(default = "default_pin_digits")]
    pub pin_digits: u8,
    #[serde(default)]
    pub min_entropy: Option<u8>,
    #[serde(default = "default_replicas")]
    pub replicas: u32,
    #[serde(default)]
    pub faulty_voters: u32,
}

impl ScenarioConfig {
    pub fn new(scenario: ScenarioKind) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            seed: default_seed(),
            runs: default_runs(),
            pin_digits: default_pin_digits(),
            min_entropy: None,
            replicas: default_replicas(),
            faulty_voters: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.runs < 1 {
            return Err(ScenarioError::InvalidConfig("runs must be at least 1".into()));
        }
        if self.pin_digits != 4 && self.pin_digits != 6 {
            return Err(ScenarioError::InvalidConfig(format!(
                "pin_digits must be 4 or 6, got {}",
                self.pin_digits
            )));
        }
        if self.replicas < 1 {
            return Err(ScenarioError::InvalidConfig("replicas must be at least 1".into()));
        }
        if self.faulty_voters >= self.replicas {
            return Err(ScenarioError::InvalidConfig(format!(
                "faulty_voters ({}) must be fewer than replicas ({})",
                self.faulty_voters, self.replicas
            )));
        }
        if let Some(min) = self.min_entropy {
            if !(1..=16).contains(&min) {
                return Err(ScenarioError::InvalidConfig(format!(
                    "min_entropy must be in 1..=16, got {min}"
                )));
            }
        }
        Ok(())
    }
}

/// Attack verdict fields of one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub kind: String,
    pub succeeded: bool,
    pub trials_used: u64,
    pub recovered_material_hex: Option<String>,
    pub notes: String,
}

impl From<&AttackOutcome> for AttackRecord {
    fn from(o: &AttackOutcome) -> AttackRecord {
        AttackRecord {
            kind: o.attack_kind.name().to_string(),
            succeeded: o.succeeded,
            trials_used: o.trials_used,
            recovered_material_hex: o.recovered_material.as_ref().map(hex::encode),
            notes: o.notes.clone(),
        }
    }
}

/// Mutation-campaign fields of one tamper-ledger run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperRecord {
    pub flips: u32,
    pub detected: u32,
    pub first_invalid_index: u64,
}

/// One seeded simulation inside a batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: u32,
    pub seed: u64,
    /// The run's verdict: attack success for attack scenarios, completion
    /// for pairing scenarios, full detection for tamper scenarios.
    pub succeeded: bool,
    pub stage_trace_digest: Option<String>,
    pub session_fingerprint: Option<String>,
    pub negotiated_entropy: Option<u8>,
    pub attack: Option<AttackRecord>,
    /// Whether recovered key material matched the session's true key.
    pub recovered_key_matches: Option<bool>,
    pub chain_length: Option<u64>,
    pub rounds: u64,
    pub tamper: Option<TamperRecord>,
    pub notes: String,
}

/// Whole-batch summary. `success_rate` is exactly `successes / runs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: u32,
    pub successes: u32,
    pub success_rate: f64,
    pub mean_trials: f64,
    pub wall_time_ms: u64,
}

/// The structured result of [`run_scenario`]. Field names are frozen; see
/// the README for the schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub schema_version: u32,
    pub config: ScenarioConfig,
    pub records: Vec<RunRecord>,
    pub aggregate: Aggregate,
}

impl ScenarioReport {
    /// The report with timing zeroed, for byte-exact comparisons.
    pub fn without_timing(&self) -> ScenarioReport {
        let mut clone = self.clone();
        clone.aggregate.wall_time_ms = 0;
        clone
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    HumanText,
    Structured,
}

/// Labeled sub-seed derivation: every randomness consumer gets its own
/// stream, keyed by the run seed and a role label, so adding one consumer
/// never perturbs another.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut preimage = Vec::with_capacity(12 + label.len());
    preimage.extend_from_slice(b"SEED");
    preimage.extend_from_slice(&base.to_be_bytes());
    preimage.extend_from_slice(label.as_bytes());
    u64::from_be_bytes(hash(&preimage).0[..8].try_into().unwrap())
}

fn derive_addr(seed: u64, label: &str, class: u8) -> BdAddr {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, label));
    let mut bytes = [0u8; 6];
    rng.fill_bytes(&mut bytes);
    // Distinct leading byte per role keeps addresses collision-free.
    bytes[0] = class;
    BdAddr(bytes)
}

fn session_fingerprint(keys: &SessionKeys) -> String {
    let mut buf = Vec::with_capacity(49);
    buf.extend_from_slice(keys.k_init.bytes());
    buf.extend_from_slice(keys.k_link.bytes());
    buf.extend_from_slice(keys.k_enc.bytes());
    buf.push(keys.negotiated_entropy);
    hex::encode(&hash(&buf).0[..8])
}

fn trace_digest(trace: &[Stage]) -> String {
    let bytes: Vec<u8> = trace.iter().map(|s| *s as u8).collect();
    hex::encode(&hash(&bytes).0[..8])
}

struct Endpoints {
    net: SimNetwork,
    a: BdAddr,
    b: BdAddr,
}

/// Two linked devices with a shared random PIN. The sub-seed labels here fix
/// the randomness streams for baseline and secured runs alike, which is what
/// makes their derived session keys comparable under one seed.
fn endpoints(run_seed: u64, config: &ScenarioConfig) -> Endpoints {
    let space = 10u64.pow(config.pin_digits as u32);
    let mut pin_rng = ChaCha20Rng::seed_from_u64(derive_seed(run_seed, "pin"));
    let pin = format!("{:0w$}", pin_rng.random_range(0..space), w = config.pin_digits as usize);

    let a = derive_addr(run_seed, "addr-a", 0x0a);
    let b = derive_addr(run_seed, "addr-b", 0x0b);
    let mut net = SimNetwork::new(derive_seed(run_seed, "net"));
    let mut dev_a = DeviceIdentity::new(a, &pin, Role::Master, derive_seed(run_seed, "dev-a"));
    let mut dev_b = DeviceIdentity::new(b, &pin, Role::Slave, derive_seed(run_seed, "dev-b"));
    dev_a.policy.min_entropy = config.min_entropy;
    dev_b.policy.min_entropy = config.min_entropy;
    net.register_device(dev_a).unwrap();
    net.register_device(dev_b).unwrap();
    net.build_piconet(a, &[b]).unwrap();
    Endpoints { net, a, b }
}

struct SecuredSetup {
    net: SimNetwork,
    a: BdAddr,
    b: BdAddr,
    impersonator: BdAddr,
    registry: MemberRegistry,
    replicas: Vec<Chain>,
}

/// Ledger members beyond the two endpoints. Their keys derive from the
/// batch seed, not the run seed: they are scenery shared by every run, and
/// nothing recorded per run depends on them.
fn batch_observers(config: &ScenarioConfig) -> Vec<(BdAddr, AsymKeyPair)> {
    (0..config.replicas.saturating_sub(2))
        .map(|i| {
            let mut addr = derive_addr(config.seed, &format!("observer-{i}"), 0x0c);
            addr.0[1] = i as u8;
            let pair =
                generate_keypair(1024, derive_seed(config.seed, &format!("observer-key-{i}")))
                    .unwrap();
            (addr, pair)
        })
        .collect()
}

fn secured_setup(
    run_seed: u64,
    config: &ScenarioConfig,
    observers: &[(BdAddr, AsymKeyPair)],
) -> SecuredSetup {
    let mut ep = endpoints(run_seed, config);
    let mut registry = MemberRegistry::new();

    let pair_a = generate_keypair(1024, derive_seed(run_seed, "key-a")).unwrap();
    let pair_b = generate_keypair(1024, derive_seed(run_seed, "key-b")).unwrap();
    registry.register(ep.a, pair_a.public.clone()).unwrap();
    registry.register(ep.b, pair_b.public.clone()).unwrap();
    ep.net.device_mut(&ep.a).unwrap().keypair = Some(pair_a);
    ep.net.device_mut(&ep.b).unwrap().keypair = Some(pair_b);

    for (i, (addr, pair)) in observers.iter().enumerate() {
        registry.register(*addr, pair.public.clone()).unwrap();
        let mut dev = DeviceIdentity::new(
            *addr,
            "0000",
            Role::Slave,
            derive_seed(run_seed, &format!("dev-observer-{i}")),
        );
        dev.keypair = Some(pair.clone());
        ep.net.register_device(dev).unwrap();
    }

    // A non-member device that plays the impersonator in bias scenarios.
    let impersonator = derive_addr(run_seed, "addr-imp", 0x0d);
    ep.net
        .register_device(DeviceIdentity::new(
            impersonator,
            "0000",
            Role::Master,
            derive_seed(run_seed, "dev-imp"),
        ))
        .unwrap();

    let replicas = vec![Chain::new(); registry.len()];
    SecuredSetup {
        net: ep.net,
        a: ep.a,
        b: ep.b,
        impersonator,
        registry,
        replicas,
    }
}

fn secured_config(config: &ScenarioConfig) -> SecuredSessionConfig {
    SecuredSessionConfig {
        faulty_voters: config.faulty_voters as usize,
        ..Default::default()
    }
}

fn blank_record(run: u32, seed: u64) -> RunRecord {
    RunRecord {
        run,
        seed,
        succeeded: false,
        stage_trace_digest: None,
        session_fingerprint: None,
        negotiated_entropy: None,
        attack: None,
        recovered_key_matches: None,
        chain_length: None,
        rounds: 0,
        tamper: None,
        notes: String::new(),
    }
}

fn record_session(record: &mut RunRecord, session: &PairingSession) {
    record.stage_trace_digest = Some(trace_digest(session.trace()));
    record.session_fingerprint = session.keys().map(|k| session_fingerprint(&k));
    record.negotiated_entropy = session.negotiated_entropy();
    record.rounds = session.rounds();
}

fn run_pair_baseline(run: u32, run_seed: u64, config: &ScenarioConfig) -> RunRecord {
    let mut record = blank_record(run, run_seed);
    let mut ep = endpoints(run_seed, config);
    match run_full_session(&mut ep.net, ep.a, ep.b, &SessionOptions::default()) {
        Ok((session, received)) => {
            record_session(&mut record, &session);
            record.succeeded = received == crate::CASE_STUDY_PAYLOAD
                && session.keys() == session.keys_responder();
            record.notes = "honest baseline session".to_string();
        }
        Err(e) => record.notes = format!("session failed: {e}"),
    }
    record
}

fn run_pair_secured(
    run: u32,
    run_seed: u64,
    config: &ScenarioConfig,
    observers: &[(BdAddr, AsymKeyPair)],
) -> (RunRecord, Option<Chain>) {
    let mut record = blank_record(run, run_seed);
    let mut setup = secured_setup(run_seed, config, observers);
    match secure_pairing(
        &mut setup.net,
        setup.a,
        setup.b,
        &mut setup.replicas,
        &setup.registry,
        &secured_config(config),
        &SessionOptions::default(),
    ) {
        Ok(result) => {
            record_session(&mut record, &result.session);
            record.rounds = result.rounds;
            record.chain_length = Some(setup.replicas[0].len());
            record.succeeded = result.setup_payload == crate::CASE_STUDY_PAYLOAD
                && result.received_payload == crate::CASE_STUDY_PAYLOAD
                && result.session.keys() == result.session.keys_responder();
            record.notes = format!("{} blocks committed", result.committed_blocks);
        }
        Err(e) => record.notes = format!("secured session failed: {e}"),
    }
    (record, Some(setup.replicas.swap_remove(0)))
}

fn run_attack_knob(run: u32, run_seed: u64, config: &ScenarioConfig) -> RunRecord {
    let mut record = blank_record(run, run_seed);
    let mut ep = endpoints(run_seed, config);
    let mut session = PairingSession::new(&ep.net, ep.a, ep.b).unwrap();
    let outcome = knob_attack(&mut ep.net, &mut session, &SessionOptions::default());
    record_session(&mut record, &session);
    record.succeeded = outcome.succeeded;
    record.recovered_key_matches = match (&outcome.recovered_material, session.keys()) {
        (Some(found), Some(keys)) => Some(found.as_slice() == keys.k_enc.bytes()),
        _ => None,
    };
    record.attack = Some(AttackRecord::from(&outcome));
    record
}

fn run_attack_bias(run: u32, run_seed: u64, config: &ScenarioConfig) -> RunRecord {
    let mut record = blank_record(run, run_seed);
    let mut ep = endpoints(run_seed, config);
    let impersonator = derive_addr(run_seed, "addr-imp", 0x0d);
    ep.net
        .register_device(DeviceIdentity::new(
            impersonator,
            "0000",
            Role::Master,
            derive_seed(run_seed, "dev-imp"),
        ))
        .unwrap();
    // Bond target (a) and victim (b) with an honest session first.
    if let Err(e) = run_full_session(&mut ep.net, ep.a, ep.b, &SessionOptions::default()) {
        record.notes = format!("bonding session failed: {e}");
        return record;
    }
    let outcome = bias_attack(&mut ep.net, impersonator, ep.a, ep.b);
    record.succeeded = outcome.succeeded;
    record.attack = Some(AttackRecord::from(&outcome));
    record
}

fn run_attack_pincrack(run: u32, run_seed: u64, config: &ScenarioConfig) -> RunRecord {
    let mut record = blank_record(run, run_seed);
    let mut ep = endpoints(run_seed, config);
    let (interceptor, transcript) = EavesdropInterceptor::new();
    ep.net.install_interceptor(Box::new(interceptor));
    let session = match run_full_session(&mut ep.net, ep.a, ep.b, &SessionOptions::default()) {
        Ok((session, _)) => session,
        Err(e) => {
            record.notes = format!("session failed: {e}");
            return record;
        }
    };
    record_session(&mut record, &session);

    let observed = transcript.borrow().clone();
    let outcome = pin_crack(&observed, ep.b, config.pin_digits as u32);
    record.succeeded = outcome.succeeded;
    if let Some(pin) = outcome
        .recovered_material
        .as_ref()
        .and_then(|m| String::from_utf8(m.clone()).ok())
    {
        let recovered = link_key_from_pin(&observed, ep.b, &pin);
        record.recovered_key_matches = Some(recovered.as_ref() == session.link_key_responder());
    }
    record.attack = Some(AttackRecord::from(&outcome));
    record
}

fn run_attack_knob_secured(
    run: u32,
    run_seed: u64,
    config: &ScenarioConfig,
    observers: &[(BdAddr, AsymKeyPair)],
) -> (RunRecord, Option<Chain>) {
    let mut record = blank_record(run, run_seed);
    let mut setup = secured_setup(run_seed, config, observers);
    let (outcome, result) = attack_secured_knob(
        &mut setup.net,
        setup.a,
        setup.b,
        &mut setup.replicas,
        &setup.registry,
        &secured_config(config),
        &SessionOptions::default(),
    );
    if let Some(result) = result {
        record_session(&mut record, &result.session);
        record.rounds = result.rounds;
        record.chain_length = Some(setup.replicas[0].len());
    }
    record.succeeded = outcome.succeeded;
    record.attack = Some(AttackRecord::from(&outcome));
    (record, Some(setup.replicas.swap_remove(0)))
}

fn run_attack_bias_secured(
    run: u32,
    run_seed: u64,
    config: &ScenarioConfig,
    observers: &[(BdAddr, AsymKeyPair)],
) -> (RunRecord, Option<Chain>) {
    let mut record = blank_record(run, run_seed);
    let mut setup = secured_setup(run_seed, config, observers);
    let secured = secured_config(config);
    // Bond target (a) and victim (b) through an honest secured session.
    match secure_pairing(
        &mut setup.net,
        setup.a,
        setup.b,
        &mut setup.replicas,
        &setup.registry,
        &secured,
        &SessionOptions::default(),
    ) {
        Ok(result) => {
            record_session(&mut record, &result.session);
            record.rounds = result.rounds;
        }
        Err(e) => {
            record.notes = format!("bonding session failed: {e}");
            return (record, Some(setup.replicas.swap_remove(0)));
        }
    }
    let outcome = attack_secured_bias(
        &mut setup.net,
        setup.impersonator,
        setup.a,
        setup.b,
        &mut setup.replicas,
        &setup.registry,
        &secured,
    );
    record.chain_length = Some(setup.replicas[0].len());
    record.succeeded = outcome.succeeded;
    record.attack = Some(AttackRecord::from(&outcome));
    (record, Some(setup.replicas.swap_remove(0)))
}

fn run_attack_pincrack_secured(
    run: u32,
    run_seed: u64,
    config: &ScenarioConfig,
    observers: &[(BdAddr, AsymKeyPair)],
) -> (RunRecord, Option<Chain>) {
    let mut record = blank_record(run, run_seed);
    let mut setup = secured_setup(run_seed, config, observers);
    let (outcome, result) = attack_secured_pincrack(
        &mut setup.net,
        setup.a,
        setup.b,
        &mut setup.replicas,
        &setup.registry,
        &secured_config(config),
        &SessionOptions::default(),
        config.pin_digits as u32,
    );
    if let Some(result) = result {
        record_session(&mut record, &result.session);
        record.rounds = result.rounds;
        record.chain_length = Some(setup.replicas[0].len());
    }
    record.succeeded = outcome.succeeded;
    record.attack = Some(AttackRecord::from(&outcome));
    (record, Some(setup.replicas.swap_remove(0)))
}

/// Flips one bit (or rotates the kind byte) somewhere in the block.
fn mutate_block(block: &mut Block, rng: &mut ChaCha20Rng) {
    loop {
        match rng.random_range(0..8u8) {
            0 => {
                block.index ^= 1u64 << rng.random_range(0..64);
                return;
            }
            1 => {
                block.prev_hash.0[rng.random_range(0..32)] ^= 1 << rng.random_range(0..8);
                return;
            }
            2 => {
                block.header.sender.0[rng.random_range(0..6)] ^= 1 << rng.random_range(0..8);
                return;
            }
            3 => {
                block.header.receiver.0[rng.random_range(0..6)] ^= 1 << rng.random_range(0..8);
                return;
            }
            4 => {
                let current = block.header.msg_kind.as_byte();
                let next = (current + rng.random_range(1..12)) % 12;
                block.header.msg_kind = MessageKind::from_byte(next).unwrap();
                return;
            }
            5 => {
                block.header.seq ^= 1u64 << rng.random_range(0..64);
                return;
            }
            6 => {
                if block.payload.is_empty() {
                    continue;
                }
                let at = rng.random_range(0..block.payload.len());
                block.payload[at] ^= 1 << rng.random_range(0..8);
                return;
            }
            _ => {
                block.block_hash.0[rng.random_range(0..32)] ^= 1 << rng.random_range(0..8);
                return;
            }
        }
    }
}

fn run_tamper_ledger(run: u32, run_seed: u64, config: &ScenarioConfig) -> (RunRecord, Option<Chain>) {
    let mut record = blank_record(run, run_seed);

    // Build a committed fixture chain between two members.
    let a = derive_addr(run_seed, "addr-a", 0x0a);
    let b = derive_addr(run_seed, "addr-b", 0x0b);
    let pair_a = generate_keypair(1024, derive_seed(run_seed, "key-a")).unwrap();
    let pair_b = generate_keypair(1024, derive_seed(run_seed, "key-b")).unwrap();
    let mut registry = MemberRegistry::new();
    registry.register(a, pair_a.public.clone()).unwrap();
    registry.register(b, pair_b.public.clone()).unwrap();
    let mut replicas = vec![Chain::new(); config.replicas as usize];
    let mut payload_rng = ChaCha20Rng::seed_from_u64(derive_seed(run_seed, "payloads"));
    for i in 0..TAMPER_CHAIN_BLOCKS {
        let mut body = vec![0u8; 24];
        payload_rng.fill_bytes(&mut body);
        let ciphertext = crate::crypto::envelope_encrypt(&body, &pair_b.public);
        let header = PayloadHeader {
            sender: a,
            receiver: b,
            msg_kind: MessageKind::SetupPayload,
            seq: i,
        };
        let block = propose_block(&replicas[0], &registry, header, ciphertext).unwrap();
        let outcome =
            consensus_commit(&mut replicas, &registry, &block, config.faulty_voters as usize);
        if !outcome.committed {
            record.notes = "fixture chain commit failed".to_string();
            return (record, Some(replicas.swap_remove(0)));
        }
    }
    let chain = replicas.swap_remove(0);
    record.chain_length = Some(chain.len());

    // Mutation campaign: every single-bit flip must be detected at or before
    // the mutated block's index.
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(run_seed, "tamper"));
    let mut detected = 0u32;
    let mut first_invalid_index = None;
    for _ in 0..TAMPER_FLIPS {
        let mut mutated = chain.clone();
        let target = rng.random_range(0..chain.len());
        mutate_block(mutated.block_mut(target as usize).unwrap(), &mut rng);
        let (valid, first_invalid) = validate_chain(&mutated);
        if !valid && first_invalid.is_some_and(|i| i <= target) {
            detected += 1;
            if first_invalid_index.is_none() {
                first_invalid_index = first_invalid;
            }
        }
    }

    record.succeeded = detected == TAMPER_FLIPS;
    record.tamper = Some(TamperRecord {
        flips: TAMPER_FLIPS,
        detected,
        first_invalid_index: first_invalid_index.unwrap_or(0),
    });
    record.notes = format!("{detected}/{TAMPER_FLIPS} mutations detected");
    (record, Some(chain))
}

fn run_one(
    config: &ScenarioConfig,
    run: u32,
    observers: &[(BdAddr, AsymKeyPair)],
) -> (RunRecord, Option<Chain>) {
    let run_seed = config.seed.wrapping_add(run as u64);
    match config.scenario {
        ScenarioKind::PairBaseline => (run_pair_baseline(run, run_seed, config), None),
        ScenarioKind::PairSecured => run_pair_secured(run, run_seed, config, observers),
        ScenarioKind::AttackKnob => (run_attack_knob(run, run_seed, config), None),
        ScenarioKind::AttackBias => (run_attack_bias(run, run_seed, config), None),
        ScenarioKind::AttackPincrack => (run_attack_pincrack(run, run_seed, config), None),
        ScenarioKind::AttackKnobSecured => run_attack_knob_secured(run, run_seed, config, observers),
        ScenarioKind::AttackBiasSecured => run_attack_bias_secured(run, run_seed, config, observers),
        ScenarioKind::AttackPincrackSecured => {
            run_attack_pincrack_secured(run, run_seed, config, observers)
        }
        ScenarioKind::TamperLedger => run_tamper_ledger(run, run_seed, config),
    }
}

/// Runs one batch member in isolation; mostly useful for debugging a single
/// seed out of a batch.
pub fn run_single(config: &ScenarioConfig, run: u32) -> RunRecord {
    let observers = if config.scenario.uses_ledger() {
        batch_observers(config)
    } else {
        Vec::new()
    };
    run_one(config, run, &observers).0
}

/// Runs the whole batch and also returns run 0's final chain, when the
/// scenario builds one, for `--export-chain`.
pub fn run_scenario_with_artifacts(
    config: &ScenarioConfig,
) -> Result<(ScenarioReport, Option<Chain>), ScenarioError> {
    config.validate()?;
    let started = Instant::now();
    let observers = if config.scenario.uses_ledger() {
        batch_observers(config)
    } else {
        Vec::new()
    };

    let mut results = exec::map_indexed(config.runs as u64, |i| {
        let (record, chain) = run_one(config, i as u32, &observers);
        (record, if i == 0 { chain } else { None })
    });
    let chain = results.first_mut().and_then(|(_, c)| c.take());
    let records: Vec<RunRecord> = results.into_iter().map(|(r, _)| r).collect();

    let successes = records.iter().filter(|r| r.succeeded).count() as u32;
    let attack_trials: Vec<u64> = records
        .iter()
        .filter_map(|r| r.attack.as_ref().map(|a| a.trials_used))
        .collect();
    let mean_trials = if attack_trials.is_empty() {
        0.0
    } else {
        attack_trials.iter().sum::<u64>() as f64 / attack_trials.len() as f64
    };
    let aggregate = Aggregate {
        runs: config.runs,
        successes,
        success_rate: successes as f64 / config.runs as f64,
        mean_trials,
        wall_time_ms: started.elapsed().as_millis() as u64,
    };
    let report = ScenarioReport {
        schema_version: 1,
        config: config.clone(),
        records,
        aggregate,
    };
    Ok((report, chain))
}

/// Executes `runs` independent seeded simulations (seed, seed+1, ...) and
/// aggregates their records. Deterministic for a fixed config, timing aside.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
    run_scenario_with_artifacts(config).map(|(report, _)| report)
}

/// The success rate a scenario is documented to produce under its own
/// config, used by `--assert-expected`.
pub fn expected_success_rate(config: &ScenarioConfig) -> f64 {
    match config.scenario {
        ScenarioKind::PairBaseline
        | ScenarioKind::PairSecured
        | ScenarioKind::AttackBias
        | ScenarioKind::AttackPincrack
        | ScenarioKind::TamperLedger => 1.0,
        // The downgrade is refused when the endpoints enforce a floor above
        // one byte.
        ScenarioKind::AttackKnob => {
            if config.min_entropy.unwrap_or(1) > 1 {
                0.0
            } else {
                1.0
            }
        }
        ScenarioKind::AttackKnobSecured
        | ScenarioKind::AttackBiasSecured
        | ScenarioKind::AttackPincrackSecured => 0.0,
    }
}

/// Whether the report matches its scenario's documented verdict.
pub fn expected_verdict_holds(report: &ScenarioReport) -> bool {
    report.aggregate.success_rate == expected_success_rate(&report.config)
}

/// Serializes a report. The structured form round-trips through
/// [`parse_report`]; the human form is line-oriented.
pub fn emit_report(report: &ScenarioReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Structured => {
            let mut out = serde_json::to_vec_pretty(report).expect("report serializes");
            out.push(b'\n');
            out
        }
        ReportFormat::HumanText => emit_human(report).into_bytes(),
    }
}

/// Parses a structured report back.
pub fn parse_report(bytes: &[u8]) -> Result<ScenarioReport, ScenarioError> {
    serde_json::from_slice(bytes).map_err(|e| ScenarioError::Report(e.to_string()))
}

fn emit_human(report: &ScenarioReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let c = &report.config;
    writeln!(out, "scenario: {}", c.scenario).unwrap();
    writeln!(
        out,
        "config: seed={} runs={} pin-digits={} min-entropy={} replicas={} faulty-voters={}",
        c.seed,
        c.runs,
        c.pin_digits,
        c.min_entropy.map_or("-".to_string(), |m| m.to_string()),
        c.replicas,
        c.faulty_voters
    )
    .unwrap();
    for r in &report.records {
        write!(out, "run {:03} seed={} ok={}", r.run, r.seed, r.succeeded).unwrap();
        if let Some(attack) = &r.attack {
            write!(
                out,
                " attack={} succeeded={} trials={}",
                attack.kind, attack.succeeded, attack.trials_used
            )
            .unwrap();
        }
        if let Some(e) = r.negotiated_entropy {
            write!(out, " entropy={e}").unwrap();
        }
        if let Some(matches) = r.recovered_key_matches {
            write!(out, " key-match={matches}").unwrap();
        }
        if let Some(len) = r.chain_length {
            write!(out, " chain={len}").unwrap();
        }
        write!(out, " rounds={}", r.rounds).unwrap();
        if let Some(t) = &r.tamper {
            write!(
                out,
                " flips={} detected={} first-invalid-index={}",
                t.flips, t.detected, t.first_invalid_index
            )
            .unwrap();
        }
        if !r.notes.is_empty() {
            write!(out, "  # {}", r.notes).unwrap();
        }
        out.push('\n');
    }
    let a = &report.aggregate;
    writeln!(
        out,
        "aggregate: successes={}/{} success-rate={} mean-trials={} wall-time-ms={}",
        a.successes, a.runs, a.success_rate, a.mean_trials, a.wall_time_ms
    )
    .unwrap();
    out
}
