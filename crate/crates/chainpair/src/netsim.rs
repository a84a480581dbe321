//! Deterministic in-process message fabric modeling piconets.
//!
//! Delivery is synchronous-round based: `send` enqueues, `step` drains the
//! queue in send order, passing every message through every installed
//! interceptor exactly once. Interceptors may pass, rewrite, or drop a
//! message, which is how attackers observe and tamper with baseline-channel
//! traffic. A missing expected message after a step is the simulator's
//! timeout signal.
//!
//! The full delivery trace is logged and exportable as structured text (one
//! line per delivered message: `seq,sender,receiver,kind,hex-body`) for
//! golden-trace comparisons.
//!
//! Topology is piconet-only: one master, up to seven active slaves, slaves
//! talking exclusively to their master. Interconnecting piconets into a
//! scatternet (a device mastering one net while slaving in another) is not
//! simulated; a device may appear in several piconets here, but no routing
//! happens across them.

use crate::crypto::{AsymKeyPair, BdAddr, KeyMaterial, Nonce128, Offset96};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

/// A piconet supports at most seven active slaves.
pub const MAX_ACTIVE_SLAVES: usize = 7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("device {0} is already registered")]
    DuplicateDevice(BdAddr),
    #[error("device {0} is not registered")]
    UnknownDevice(BdAddr),
    #[error("{0} and {1} do not share a master-slave link")]
    NoLink(BdAddr, BdAddr),
    #[error("piconet cannot hold {0} active slaves (maximum {MAX_ACTIVE_SLAVES})")]
    TooManySlaves(usize),
    #[error("piconet needs at least one slave")]
    NoSlaves,
    #[error("slave {0} listed twice")]
    DuplicateSlave(BdAddr),
    #[error("master {0} cannot also be a slave")]
    MasterListedAsSlave(BdAddr),
}

/// Closed enumeration of everything that can cross the baseline channel or
/// ride the ledger overlay.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
#[repr(u8)]
pub enum MessageKind {
    /// Ledger-only: the chain's genesis entry.
    Genesis = 0,
    InitKeyRand = 1,
    LinkKeyMasked = 2,
    AuthChallenge = 3,
    AuthResponse = 4,
    MutualAuthChallenge = 5,
    MutualAuthResponse = 6,
    EntropyProposal = 7,
    EntropyAccept = 8,
    EncryptionSetup = 9,
    /// Ledger-only: application payload exchanged during secured setup.
    SetupPayload = 10,
    Data = 11,
}

impl MessageKind {
    pub const ALL: [MessageKind; 12] = [
        MessageKind::Genesis,
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
        MessageKind::Data,
    ];

    pub fn as_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Option<MessageKind> {
        MessageKind::ALL.get(b as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Genesis => "genesis",
            MessageKind::InitKeyRand => "init-key-rand",
            MessageKind::LinkKeyMasked => "link-key-masked",
            MessageKind::AuthChallenge => "auth-challenge",
            MessageKind::AuthResponse => "auth-response",
            MessageKind::MutualAuthChallenge => "mutual-auth-challenge",
            MessageKind::MutualAuthResponse => "mutual-auth-response",
            MessageKind::EntropyProposal => "entropy-proposal",
            MessageKind::EntropyAccept => "entropy-accept",
            MessageKind::EncryptionSetup => "encryption-setup",
            MessageKind::SetupPayload => "setup-payload",
            MessageKind::Data => "data",
        }
    }
}

/// Device role within a piconet.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Role {
    Master,
    Slave,
}

/// Per-device pairing policy knobs. The defaults model the vulnerable
/// baseline: one-way authentication, role switching allowed, no entropy
/// floor.
#[derive(Clone, Copy, Debug)]
pub struct PairingPolicy {
    pub min_entropy: Option<u8>,
    pub mutual_auth: bool,
    pub allow_role_switch: bool,
}

impl Default for PairingPolicy {
    fn default() -> Self {
        PairingPolicy {
            min_entropy: None,
            mutual_auth: false,
            allow_role_switch: true,
        }
    }
}

/// A simulated device: factory address, user PIN, optional ledger keypair,
/// stored link keys, and its own seeded randomness stream.
///
/// Giving each device an independent stream keyed to its address keeps the
/// protocol's nonce draws identical whether messages travel the baseline
/// channel or the ledger overlay.
pub struct DeviceIdentity {
    pub bd_addr: BdAddr,
    pub pin: String,
    pub role: Role,
    pub keypair: Option<AsymKeyPair>,
    pub policy: PairingPolicy,
    bond_store: BTreeMap<BdAddr, KeyMaterial>,
    rng: ChaCha20Rng,
}

impl DeviceIdentity {
    pub fn new(bd_addr: BdAddr, pin: &str, role: Role, rng_seed: u64) -> DeviceIdentity {
        DeviceIdentity {
            bd_addr,
            pin: pin.to_string(),
            role,
            keypair: None,
            policy: PairingPolicy::default(),
            bond_store: BTreeMap::new(),
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn draw_nonce(&mut self) -> Nonce128 {
        let mut buf = [0u8; 16];
        self.rng.fill_bytes(&mut buf);
        Nonce128(buf)
    }

    pub fn draw_offset(&mut self) -> Offset96 {
        let mut buf = [0u8; 12];
        self.rng.fill_bytes(&mut buf);
        Offset96(buf)
    }

    pub fn draw_bytes(&mut self, n: usize) -> Vec<u8> {
        let mut buf = vec![0u8; n];
        self.rng.fill_bytes(&mut buf);
        buf
    }

    /// Stores `k_link` for `peer`; a later key for the same peer wins.
    pub fn bond(&mut self, peer: BdAddr, k_link: KeyMaterial) {
        self.bond_store.insert(peer, k_link);
    }

    pub fn bonded_key(&self, peer: &BdAddr) -> Option<&KeyMaterial> {
        self.bond_store.get(peer)
    }
}

/// One master plus one to seven active slaves; slaves only talk to the
/// master, never to each other.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piconet {
    master: BdAddr,
    active_slaves: Vec<BdAddr>,
}

impl Piconet {
    pub fn new(master: BdAddr, slaves: &[BdAddr]) -> Result<Piconet, NetError> {
        if slaves.is_empty() {
            return Err(NetError::NoSlaves);
        }
        if slaves.len() > MAX_ACTIVE_SLAVES {
            return Err(NetError::TooManySlaves(slaves.len()));
        }
        let mut seen = Vec::with_capacity(slaves.len());
        for &s in slaves {
            if s == master {
                return Err(NetError::MasterListedAsSlave(s));
            }
            if seen.contains(&s) {
                return Err(NetError::DuplicateSlave(s));
            }
            seen.push(s);
        }
        Ok(Piconet {
            master,
            active_slaves: seen,
        })
    }

    pub fn master(&self) -> BdAddr {
        self.master
    }

    pub fn active_slaves(&self) -> &[BdAddr] {
        &self.active_slaves
    }

    pub fn add_slave(&mut self, slave: BdAddr) -> Result<(), NetError> {
        if self.active_slaves.len() == MAX_ACTIVE_SLAVES {
            return Err(NetError::TooManySlaves(self.active_slaves.len() + 1));
        }
        if slave == self.master {
            return Err(NetError::MasterListedAsSlave(slave));
        }
        if self.active_slaves.contains(&slave) {
            return Err(NetError::DuplicateSlave(slave));
        }
        self.active_slaves.push(slave);
        Ok(())
    }

    pub fn remove_slave(&mut self, slave: &BdAddr) -> Result<(), NetError> {
        if self.active_slaves.len() == 1 && self.active_slaves.contains(slave) {
            return Err(NetError::NoSlaves);
        }
        self.active_slaves.retain(|s| s != slave);
        Ok(())
    }

    /// Whether `a` and `b` hold a direct master-slave link here.
    pub fn links(&self, a: BdAddr, b: BdAddr) -> bool {
        (a == self.master && self.active_slaves.contains(&b))
            || (b == self.master && self.active_slaves.contains(&a))
    }
}

/// A message in flight on the baseline channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMessage {
    pub sender: BdAddr,
    pub receiver: BdAddr,
    pub kind: MessageKind,
    pub body: Vec<u8>,
    pub sequence: u64,
}

/// What an interceptor does with a message at delivery time.
pub enum Intercept {
    Pass,
    Rewrite(Vec<u8>),
    Drop,
}

/// Hook applied to every delivered message, in installation order.
pub trait Interceptor {
    fn intercept(&mut self, msg: &ChannelMessage) -> Intercept;
}

/// Wraps a closure as an interceptor.
pub struct FnInterceptor<F>(pub F);

impl<F> Interceptor for FnInterceptor<F>
where
    F: FnMut(&ChannelMessage) -> Intercept,
{
    fn intercept(&mut self, msg: &ChannelMessage) -> Intercept {
        (self.0)(msg)
    }
}

/// Log entry for one processed message. `delivered_body` is `None` when an
/// interceptor dropped the message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub sequence: u64,
    pub sender: BdAddr,
    pub receiver: BdAddr,
    pub kind: MessageKind,
    pub sent_body: Vec<u8>,
    pub delivered_body: Option<Vec<u8>>,
}

/// The simulation fabric: device registry, piconets, interceptors, and the
/// pending-delivery queue. One instance per seeded scenario; instances are
/// independent.
pub struct SimNetwork {
    rng_seed: u64,
    devices: BTreeMap<BdAddr, DeviceIdentity>,
    piconets: Vec<Piconet>,
    interceptors: Vec<Box<dyn Interceptor>>,
    queue: VecDeque<ChannelMessage>,
    inboxes: BTreeMap<BdAddr, VecDeque<ChannelMessage>>,
    log: Vec<DeliveryRecord>,
    seq_counters: BTreeMap<(BdAddr, BdAddr), u64>,
}

impl SimNetwork {
    pub fn new(rng_seed: u64) -> SimNetwork {
        SimNetwork {
            rng_seed,
            devices: BTreeMap::new(),
            piconets: Vec::new(),
            interceptors: Vec::new(),
            queue: VecDeque::new(),
            inboxes: BTreeMap::new(),
            log: Vec::new(),
            seq_counters: BTreeMap::new(),
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn register_device(&mut self, device: DeviceIdentity) -> Result<(), NetError> {
        let addr = device.bd_addr;
        if self.devices.contains_key(&addr) {
            return Err(NetError::DuplicateDevice(addr));
        }
        self.devices.insert(addr, device);
        self.inboxes.insert(addr, VecDeque::new());
        Ok(())
    }

    pub fn device(&self, addr: &BdAddr) -> Result<&DeviceIdentity, NetError> {
        self.devices.get(addr).ok_or(NetError::UnknownDevice(*addr))
    }

    pub fn device_mut(&mut self, addr: &BdAddr) -> Result<&mut DeviceIdentity, NetError> {
        self.devices
            .get_mut(addr)
            .ok_or(NetError::UnknownDevice(*addr))
    }

    /// Builds and installs a piconet after checking every id is registered.
    pub fn build_piconet(&mut self, master: BdAddr, slaves: &[BdAddr]) -> Result<&Piconet, NetError> {
        if !self.devices.contains_key(&master) {
            return Err(NetError::UnknownDevice(master));
        }
        for s in slaves {
            if !self.devices.contains_key(s) {
                return Err(NetError::UnknownDevice(*s));
            }
        }
        let piconet = Piconet::new(master, slaves)?;
        self.piconets.push(piconet);
        Ok(self.piconets.last().unwrap())
    }

    pub fn piconets(&self) -> &[Piconet] {
        &self.piconets
    }

    fn linked(&self, a: BdAddr, b: BdAddr) -> bool {
        self.piconets.iter().any(|p| p.links(a, b))
    }

    pub fn install_interceptor(&mut self, interceptor: Box<dyn Interceptor>) {
        self.interceptors.push(interceptor);
    }

    /// Enqueues a message for the next `step`, assigning the per-pair
    /// sequence number.
    pub fn send(
        &mut self,
        sender: BdAddr,
        receiver: BdAddr,
        kind: MessageKind,
        body: Vec<u8>,
    ) -> Result<u64, NetError> {
        if !self.devices.contains_key(&sender) {
            return Err(NetError::UnknownDevice(sender));
        }
        if !self.devices.contains_key(&receiver) {
            return Err(NetError::UnknownDevice(receiver));
        }
        if !self.linked(sender, receiver) {
            return Err(NetError::NoLink(sender, receiver));
        }
        let seq = self.seq_counters.entry((sender, receiver)).or_insert(0);
        *seq += 1;
        let sequence = *seq;
        self.queue.push_back(ChannelMessage {
            sender,
            receiver,
            kind,
            body,
            sequence,
        });
        Ok(sequence)
    }

    /// Delivers every queued message in send order and returns the count of
    /// messages that reached an inbox.
    pub fn step(&mut self) -> usize {
        let mut delivered = 0;
        while let Some(msg) = self.queue.pop_front() {
            let mut current = msg.clone();
            let mut dropped = false;
            for interceptor in self.interceptors.iter_mut() {
                match interceptor.intercept(&current) {
                    Intercept::Pass => {}
                    Intercept::Rewrite(body) => current.body = body,
                    Intercept::Drop => {
                        dropped = true;
                        break;
                    }
                }
            }
            self.log.push(DeliveryRecord {
                sequence: msg.sequence,
                sender: msg.sender,
                receiver: msg.receiver,
                kind: msg.kind,
                sent_body: msg.body,
                delivered_body: (!dropped).then(|| current.body.clone()),
            });
            if !dropped {
                self.inboxes
                    .get_mut(&current.receiver)
                    .expect("receiver checked at send")
                    .push_back(current);
                delivered += 1;
            }
        }
        delivered
    }

    /// Pops the oldest message waiting in `receiver`'s inbox.
    pub fn recv(&mut self, receiver: &BdAddr) -> Option<ChannelMessage> {
        self.inboxes.get_mut(receiver)?.pop_front()
    }

    pub fn log(&self) -> &[DeliveryRecord] {
        &self.log
    }

    /// Structured-text trace of all delivered messages, one per line:
    /// `seq,sender,receiver,kind,hex-body`.
    pub fn export_trace(&self) -> String {
        let mut out = String::new();
        for rec in &self.log {
            if let Some(body) = &rec.delivered_body {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    rec.sequence,
                    rec.sender.to_hex(),
                    rec.receiver.to_hex(),
                    rec.kind.name(),
                    hex::encode(body)
                ));
            }
        }
        out
    }
}
