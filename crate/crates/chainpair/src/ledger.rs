//! Private hash-chained ledger: a member registry of disclosed public keys,
//! blocks carrying envelope-encrypted payloads, majority-vote commits across
//! replica chains, and tamper detection.
//!
//! Block hashes are SHA-256 over a frozen canonical preimage:
//!
//! ```text
//! index(8, big-endian) ‖ prev_hash(32) ‖ sender(6) ‖ receiver(6) ‖
//! kind(1) ‖ seq(8, big-endian) ‖ payload_len(8, big-endian) ‖ payload
//! ```
//!
//! Chains export as structured text, one block per line:
//! `index,prev_hash,payload,block_hash` with hex fields, where the payload
//! column is the 21-byte header encoding followed by the envelope
//! ciphertext. An independent implementation can re-verify every hash and
//! link from the export alone.

use crate::crypto::{hash, BdAddr, HashDigest, PublicKey};
use crate::exec;
use crate::netsim::MessageKind;
use std::collections::BTreeMap;
use thiserror::Error;

/// Encoded length of a [`PayloadHeader`].
pub const HEADER_LEN: usize = 21;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("{0} is not a registered member")]
    UnregisteredMember(BdAddr),
    #[error("{0} is already registered")]
    DuplicateMember(BdAddr),
    #[error("malformed chain export at line {0}")]
    MalformedExport(usize),
}

/// Routing header carried inside every block: who sent what kind of pairing
/// message to whom.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PayloadHeader {
    pub sender: BdAddr,
    pub receiver: BdAddr,
    pub msg_kind: MessageKind,
    pub seq: u64,
}

impl PayloadHeader {
    fn genesis() -> PayloadHeader {
        PayloadHeader {
            sender: BdAddr::ZERO,
            receiver: BdAddr::ZERO,
            msg_kind: MessageKind::Genesis,
            seq: 0,
        }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..6].copy_from_slice(&self.sender.0);
        out[6..12].copy_from_slice(&self.receiver.0);
        out[12] = self.msg_kind.as_byte();
        out[13..21].copy_from_slice(&self.seq.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<PayloadHeader> {
        if bytes.len() != HEADER_LEN {
            return None;
        }
        Some(PayloadHeader {
            sender: BdAddr(bytes[..6].try_into().unwrap()),
            receiver: BdAddr(bytes[6..12].try_into().unwrap()),
            msg_kind: MessageKind::from_byte(bytes[12])?,
            seq: u64::from_be_bytes(bytes[13..21].try_into().unwrap()),
        })
    }
}

/// One ledger entry. The payload is envelope ciphertext readable by every
/// member but decryptable only by the addressed receiver.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: HashDigest,
    pub header: PayloadHeader,
    pub payload: Vec<u8>,
    pub block_hash: HashDigest,
}

impl Block {
    pub fn genesis() -> Block {
        let mut block = Block {
            index: 0,
            prev_hash: HashDigest::ZERO,
            header: PayloadHeader::genesis(),
            payload: Vec::new(),
            block_hash: HashDigest::ZERO,
        };
        block.block_hash = block.compute_hash();
        block
    }

    /// Canonical hashing preimage; see the module docs for the layout.
    pub fn preimage(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 32 + HEADER_LEN + 8 + self.payload.len());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(self.prev_hash.as_bytes());
        out.extend_from_slice(&self.header.encode());
        out.extend_from_slice(&(self.payload.len() as u64).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn compute_hash(&self) -> HashDigest {
        hash(&self.preimage())
    }

    /// Whether the stored hash matches a recomputation.
    pub fn verify_hash(&self) -> bool {
        self.block_hash == self.compute_hash()
    }
}

/// An ordered, genesis-rooted chain of blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chain {
    blocks: Vec<Block>,
}

impl Default for Chain {
    fn default() -> Self {
        Chain::new()
    }
}

impl Chain {
    /// A chain holding exactly the genesis block.
    pub fn new() -> Chain {
        Chain {
            blocks: vec![Block::genesis()],
        }
    }

    pub fn len(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        false // a chain always holds at least genesis
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().unwrap()
    }

    /// Test hook: direct mutable access for tamper campaigns.
    pub fn block_mut(&mut self, index: usize) -> Option<&mut Block> {
        self.blocks.get_mut(index)
    }
}

/// Registry of members and their disclosed public keys; append-only within a
/// scenario.
#[derive(Clone, Default)]
pub struct MemberRegistry {
    members: BTreeMap<BdAddr, PublicKey>,
}

impl MemberRegistry {
    pub fn new() -> MemberRegistry {
        MemberRegistry::default()
    }

    pub fn register(&mut self, id: BdAddr, key: PublicKey) -> Result<(), LedgerError> {
        if self.members.contains_key(&id) {
            return Err(LedgerError::DuplicateMember(id));
        }
        self.members.insert(id, key);
        Ok(())
    }

    pub fn public_key(&self, id: &BdAddr) -> Option<&PublicKey> {
        self.members.get(id)
    }

    pub fn contains(&self, id: &BdAddr) -> bool {
        self.members.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BdAddr, &PublicKey)> {
        self.members.iter()
    }
}

/// Builds the block that would extend `chain`, without appending it;
/// consensus gates every append.
pub fn propose_block(
    chain: &Chain,
    registry: &MemberRegistry,
    header: PayloadHeader,
    ciphertext: Vec<u8>,
) -> Result<Block, LedgerError> {
    if !registry.contains(&header.sender) {
        return Err(LedgerError::UnregisteredMember(header.sender));
    }
    if !registry.contains(&header.receiver) {
        return Err(LedgerError::UnregisteredMember(header.receiver));
    }
    let mut block = Block {
        index: chain.len(),
        prev_hash: chain.tip().block_hash,
        header,
        payload: ciphertext,
        block_hash: HashDigest::ZERO,
    };
    block.block_hash = block.compute_hash();
    Ok(block)
}

/// Result of a consensus round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommitOutcome {
    pub committed: bool,
    pub votes_in_favor: usize,
    pub replica_count: usize,
}

fn block_extends(replica: &Chain, registry: &MemberRegistry, block: &Block) -> bool {
    block.index == replica.len()
        && block.prev_hash == replica.tip().block_hash
        && block.verify_hash()
        && registry.contains(&block.header.sender)
        && registry.contains(&block.header.receiver)
}

/// Majority-vote commit: every replica validates the block independently
/// and votes; the block is appended to all replicas only when votes exceed
/// half the replica count. The last `faulty_voters` replicas withhold their
/// vote regardless of validity. A block that fails validation receives no
/// votes, so it can never reach a quorum.
pub fn consensus_commit(
    replicas: &mut [Chain],
    registry: &MemberRegistry,
    block: &Block,
    faulty_voters: usize,
) -> CommitOutcome {
    let replica_count = replicas.len();
    let honest = replica_count.saturating_sub(faulty_voters);
    let votes_in_favor = replicas
        .iter()
        .take(honest)
        .filter(|r| block_extends(r, registry, block))
        .count();
    let committed = votes_in_favor * 2 > replica_count;
    if committed {
        for replica in replicas.iter_mut() {
            replica.blocks.push(block.clone());
        }
    }
    CommitOutcome {
        committed,
        votes_in_favor,
        replica_count,
    }
}

/// Recomputes every hash and link. Returns `(true, None)` for an intact
/// chain, or `(false, Some(i))` with the first index where the genesis
/// shape, the index sequence, the back-link, or the block hash fails.
pub fn validate_chain(chain: &Chain) -> (bool, Option<u64>) {
    let blocks = chain.blocks();
    let flags = exec::map_indexed(blocks.len() as u64, |i| {
        let block = &blocks[i as usize];
        let linked = if i == 0 {
            block.index == 0 && block.prev_hash == HashDigest::ZERO
        } else {
            block.index == i && block.prev_hash == blocks[i as usize - 1].block_hash
        };
        linked && block.verify_hash()
    });
    match flags.iter().position(|ok| !ok) {
        None => (true, None),
        Some(i) => (false, Some(i as u64)),
    }
}

/// All blocks, optionally narrowed to one receiver. Ciphertexts are returned
/// as stored: readable by anyone, decryptable only by the addressee.
pub fn read_blocks(chain: &Chain, receiver: Option<BdAddr>) -> Vec<&Block> {
    chain
        .blocks()
        .iter()
        .filter(|b| receiver.is_none_or(|r| b.header.receiver == r))
        .collect()
}

/// Structured-text export, one block per line:
/// `index,prev_hash,payload,block_hash` (payload = header ‖ ciphertext, hex).
pub fn export_chain(chain: &Chain) -> String {
    let mut out = String::new();
    for block in chain.blocks() {
        let mut payload = block.header.encode().to_vec();
        payload.extend_from_slice(&block.payload);
        out.push_str(&format!(
            "{},{},{},{}\n",
            block.index,
            block.prev_hash.to_hex(),
            hex::encode(payload),
            block.block_hash.to_hex()
        ));
    }
    out
}

/// Parses an [`export_chain`] document. The result is structural only; run
/// [`validate_chain`] to check it.
pub fn import_chain(text: &str) -> Result<Chain, LedgerError> {
    let mut blocks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let err = || LedgerError::MalformedExport(lineno + 1);
        let fields: Vec<&str> = line.split(',').collect();
        let [index, prev_hash, payload, block_hash] = fields.as_slice() else {
            return Err(err());
        };
        let index: u64 = index.parse().map_err(|_| err())?;
        let prev_hash = HashDigest::from_hex(prev_hash).ok_or_else(err)?;
        let packed = hex::decode(payload).map_err(|_| err())?;
        if packed.len() < HEADER_LEN {
            return Err(err());
        }
        let header = PayloadHeader::decode(&packed[..HEADER_LEN]).ok_or_else(err)?;
        let block_hash = HashDigest::from_hex(block_hash).ok_or_else(err)?;
        blocks.push(Block {
            index,
            prev_hash,
            header,
            payload: packed[HEADER_LEN..].to_vec(),
            block_hash,
        });
    }
    if blocks.is_empty() {
        return Err(LedgerError::MalformedExport(0));
    }
    Ok(Chain { blocks })
}
