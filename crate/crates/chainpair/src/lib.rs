//! Deterministic simulator of Bluetooth legacy pairing and its classic
//! key-exchange attacks, together with a private-ledger mitigation that
//! routes pairing-critical material through hash-chained, envelope-encrypted,
//! consensus-committed blocks.
//!
//! The crate is organized around seeded, reproducible scenario runs:
//!
//! - [`crypto`] — hashing, key derivation, seeded RSA envelopes, and the toy
//!   stream cipher the simulated link layer uses.
//! - [`netsim`] — an in-process piconet fabric with interceptor hooks, the
//!   stage on which baseline pairing and its attackers play.
//! - [`pairing`] — the five-stage legacy pairing state machine (pairing,
//!   bonding, authentication, encryption, data exchange).
//! - [`adversary`] — entropy-downgrade (KNOB), impersonation (BIAS), and
//!   offline PIN recovery attacks, built purely from interceptors plus
//!   offline search.
//! - [`ledger`] — the hash-chained member ledger with majority-vote commits
//!   and tamper detection.
//! - [`secured`] — the same pairing stages with every pre-encryption message
//!   carried as a committed ledger block instead of a radio frame.
//! - [`scenario`] — the batch runner and report emitter behind the CLI.
//!
//! Offline searches and batch runs are data-parallel via [`exec`]; build with
//! `--no-default-features` for a rayon-free sequential build.

pub mod adversary;
pub mod crypto;
pub mod exec;
pub mod ledger;
pub mod netsim;
pub mod pairing;
pub mod scenario;
pub mod secured;

/// The demo payload exchanged through the ledger during secured setup and
/// used as the known plaintext in attack scenarios.
pub const CASE_STUDY_PAYLOAD: &[u8] = b"Key1=55654415, Key2=5665415564";
