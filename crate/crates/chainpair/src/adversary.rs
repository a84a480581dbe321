//! Attacker implementations against baseline pairing: the entropy-downgrade
//! attack (KNOB), impersonation via one-way authentication and permissive
//! role switching (BIAS), and offline PIN recovery from an eavesdropped
//! transcript.
//!
//! Attackers are built purely from netsim interceptors plus offline
//! computation over observed bytes; they never touch device-internal state,
//! the PIN, or any established key. Offline searches run over the canonical
//! ascending candidate order, so reported trial counts are deterministic, and
//! are capped at [`BRUTE_FORCE_BUDGET`] so that searching a full-entropy key
//! space terminates (unsuccessfully) at desk scale.

use crate::crypto::{
    compute_sres, derive_init_key, stream_encrypt, unmask_key, BdAddr, KeyMaterial, Nonce128,
};
use crate::exec;
use crate::netsim::{ChannelMessage, Intercept, Interceptor, MessageKind, SimNetwork};
use crate::pairing::{
    drive_session, frame_payload, unframe_payload, PairingError, PairingSession,
    PairingTranscript, SessionOptions,
};
use std::cell::RefCell;
use std::rc::Rc;

/// Trial cap for key searches: enough to exhaust one or two bytes of
/// entropy, hopeless against sixteen.
pub const BRUTE_FORCE_BUDGET: u64 = 1 << 20;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AttackKind {
    Knob,
    Bias,
    PinCrack,
    PassiveEavesdrop,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Knob => "knob",
            AttackKind::Bias => "bias",
            AttackKind::PinCrack => "pin-crack",
            AttackKind::PassiveEavesdrop => "passive-eavesdrop",
        }
    }
}

/// Verdict of one attack attempt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttackOutcome {
    pub attack_kind: AttackKind,
    pub succeeded: bool,
    pub trials_used: u64,
    pub recovered_material: Option<Vec<u8>>,
    pub notes: String,
}

impl AttackOutcome {
    pub fn failure(kind: AttackKind, trials: u64, notes: impl Into<String>) -> AttackOutcome {
        AttackOutcome {
            attack_kind: kind,
            succeeded: false,
            trials_used: trials,
            recovered_material: None,
            notes: notes.into(),
        }
    }
}

/// What the KNOB interceptor saw and did.
#[derive(Debug, Default)]
pub struct KnobState {
    pub rewrote_proposal: bool,
    pub rewrote_accept: bool,
    pub observed_data: Vec<(u64, Vec<u8>)>,
}

/// Man-in-the-middle for the KNOB attack: rewrites both entropy-negotiation
/// messages to the forced value and records every data ciphertext with its
/// counter for the offline key search.
pub struct KnobInterceptor {
    forced_entropy: u8,
    state: Rc<RefCell<KnobState>>,
}

impl KnobInterceptor {
    pub fn new(forced_entropy: u8) -> (KnobInterceptor, Rc<RefCell<KnobState>>) {
        let state = Rc::new(RefCell::new(KnobState::default()));
        (
            KnobInterceptor {
                forced_entropy,
                state: state.clone(),
            },
            state,
        )
    }
}

impl Interceptor for KnobInterceptor {
    fn intercept(&mut self, msg: &ChannelMessage) -> Intercept {
        match msg.kind {
            MessageKind::EntropyProposal => {
                self.state.borrow_mut().rewrote_proposal = true;
                Intercept::Rewrite(vec![self.forced_entropy])
            }
            MessageKind::EntropyAccept => {
                self.state.borrow_mut().rewrote_accept = true;
                Intercept::Rewrite(vec![self.forced_entropy])
            }
            MessageKind::Data if msg.body.len() >= 8 => {
                let counter = u64::from_be_bytes(msg.body[..8].try_into().unwrap());
                self.state
                    .borrow_mut()
                    .observed_data
                    .push((counter, msg.body[8..].to_vec()));
                Intercept::Pass
            }
            _ => Intercept::Pass,
        }
    }
}

/// Passive observer assembling the eavesdropper's transcript from whatever
/// crosses the baseline channel.
pub struct EavesdropInterceptor {
    transcript: Rc<RefCell<PairingTranscript>>,
}

impl EavesdropInterceptor {
    pub fn new() -> (EavesdropInterceptor, Rc<RefCell<PairingTranscript>>) {
        let transcript = Rc::new(RefCell::new(PairingTranscript::default()));
        (
            EavesdropInterceptor {
                transcript: transcript.clone(),
            },
            transcript,
        )
    }
}

impl Interceptor for EavesdropInterceptor {
    fn intercept(&mut self, msg: &ChannelMessage) -> Intercept {
        self.transcript.borrow_mut().absorb(msg.kind, &msg.body);
        Intercept::Pass
    }
}

/// The candidate key at `index` in the canonical search order: the index as
/// a big-endian `entropy_bytes`-byte prefix, zero-padded to 16 bytes.
pub fn candidate_key(index: u64, entropy_bytes: u8) -> KeyMaterial {
    let mut bytes = [0u8; 16];
    let be = index.to_be_bytes();
    let take = (entropy_bytes as usize).min(8);
    bytes[entropy_bytes as usize - take..entropy_bytes as usize]
        .copy_from_slice(&be[8 - take..]);
    KeyMaterial::with_entropy(bytes, entropy_bytes).expect("entropy validated by caller")
}

fn search_space(entropy_bytes: u8) -> u64 {
    if entropy_bytes as u32 * 8 >= 63 {
        return BRUTE_FORCE_BUDGET;
    }
    (1u64 << (entropy_bytes as u32 * 8)).min(BRUTE_FORCE_BUDGET)
}

/// Exhaustive key search over all `256^entropy_bytes` zero-padded candidate
/// prefixes (capped at the trial budget): returns the first candidate whose
/// stream decryption of `ciphertext` reproduces `known_plaintext`.
///
/// `known_plaintext` must be at least 16 bytes and aligned with the start of
/// the ciphertext.
pub fn brute_force_enc_key(
    ciphertext: &[u8],
    known_plaintext: &[u8],
    counter_start: u64,
    entropy_bytes: u8,
) -> Option<KeyMaterial> {
    assert!(
        known_plaintext.len() >= 16,
        "key search needs at least 16 known plaintext bytes"
    );
    assert!((1..=16).contains(&entropy_bytes));
    let len = known_plaintext.len().min(ciphertext.len());
    let target = &known_plaintext[..len];
    let prefix = &ciphertext[..len];
    let index = exec::find_first(search_space(entropy_bytes), |i| {
        let key = candidate_key(i, entropy_bytes);
        stream_encrypt(&key, counter_start, prefix) == target
    })?;
    Some(candidate_key(index, entropy_bytes))
}

/// 1-based position of `key` in the canonical candidate order, i.e. how many
/// trials an ascending search spends to reach it.
pub fn trials_to_find(key: &KeyMaterial) -> u64 {
    let entropy = key.declared_entropy_bytes() as usize;
    let take = entropy.min(8);
    let mut be = [0u8; 8];
    be[8 - take..].copy_from_slice(&key.bytes()[entropy - take..entropy]);
    u64::from_be_bytes(be) + 1
}

/// Runs the KNOB attack against a fresh baseline session: forces both
/// entropy proposals to one byte, lets the session complete untouched
/// otherwise, then brute-forces the encryption key from the observed data
/// ciphertext and the known payload.
///
/// The endpoints see a protocol-valid negotiation, so an attacked session's
/// stage trace is identical to an honest one's unless a policy floor aborts
/// the downgrade.
pub fn knob_attack(
    net: &mut SimNetwork,
    session: &mut PairingSession,
    options: &SessionOptions,
) -> AttackOutcome {
    let (interceptor, state) = KnobInterceptor::new(1);
    net.install_interceptor(Box::new(interceptor));

    match drive_session(session, net, &mut crate::pairing::BaselineTransport, options) {
        Ok(_) => {}
        Err(PairingError::EntropyBelowMinimum { value, minimum }) => {
            return AttackOutcome::failure(
                AttackKind::Knob,
                0,
                format!(
                    "negotiation aborted: downgrade to {value} refused (policy minimum {minimum})"
                ),
            );
        }
        Err(e) => {
            return AttackOutcome::failure(AttackKind::Knob, 0, format!("session failed: {e}"));
        }
    }

    let state = state.borrow();
    let Some((counter, ciphertext)) = state.observed_data.first() else {
        return AttackOutcome::failure(AttackKind::Knob, 0, "no data ciphertext observed");
    };
    recover_key_from_traffic(ciphertext, *counter, &options.payload, 1)
}

/// Offline half of the KNOB attack, shared by the secured-mode variant:
/// searches entropies `1..=max_entropy` against one observed ciphertext.
pub fn recover_key_from_traffic(
    ciphertext: &[u8],
    counter_start: u64,
    known_payload: &[u8],
    max_entropy: u8,
) -> AttackOutcome {
    let known_frame = frame_payload(known_payload);
    let mut trials = 0u64;
    for entropy in 1..=max_entropy {
        if let Some(key) = brute_force_enc_key(ciphertext, &known_frame, counter_start, entropy) {
            trials += trials_to_find(&key);
            let plaintext = stream_encrypt(&key, counter_start, ciphertext);
            let succeeded = unframe_payload(&plaintext).is_some_and(|p| p == known_payload);
            return AttackOutcome {
                attack_kind: AttackKind::Knob,
                succeeded,
                trials_used: trials,
                recovered_material: Some(key.bytes().to_vec()),
                notes: format!("key recovered at entropy {entropy}; plaintext match: {succeeded}"),
            };
        }
        trials += search_space(entropy);
    }
    AttackOutcome::failure(
        AttackKind::Knob,
        trials,
        format!("no key found searching entropies 1..={max_entropy} within budget"),
    )
}

/// Offline PIN recovery from one eavesdropped transcript: for every
/// candidate PIN, re-derive K_init, unmask the link key, and test the SRES.
/// Succeeds only when exactly one candidate explains the transcript.
pub fn pin_crack(
    transcript: &PairingTranscript,
    responder_addr: BdAddr,
    pin_digits: u32,
) -> AttackOutcome {
    let mut missing = Vec::new();
    if transcript.in_rand.is_none() {
        missing.push("in_rand");
    }
    if transcript.masked_link_key.is_none() {
        missing.push("masked_link_key");
    }
    if transcript.au_rand.is_none() {
        missing.push("au_rand");
    }
    if transcript.sres.is_none() {
        missing.push("sres");
    }
    if !missing.is_empty() {
        return AttackOutcome::failure(
            AttackKind::PinCrack,
            0,
            format!("transcript missing fields: {}", missing.join(", ")),
        );
    }
    let in_rand = transcript.in_rand.unwrap();
    let masked = transcript.masked_link_key.unwrap();
    let au_rand = transcript.au_rand.unwrap();
    let sres = transcript.sres.unwrap();

    let space = 10u64.pow(pin_digits);
    let width = pin_digits as usize;
    let matches = exec::collect_matches(space, |n| {
        let pin = format!("{n:0width$}");
        let k_init = derive_init_key(&in_rand, responder_addr, &pin).expect("digit PIN");
        let k_link = unmask_key(&masked, &k_init);
        compute_sres(&au_rand, responder_addr, &k_link) == sres
    });

    match matches.as_slice() {
        [unique] => {
            let pin = format!("{unique:0width$}");
            AttackOutcome {
                attack_kind: AttackKind::PinCrack,
                succeeded: true,
                trials_used: space,
                recovered_material: Some(pin.into_bytes()),
                notes: "unique PIN explains the transcript".to_string(),
            }
        }
        [] => AttackOutcome::failure(AttackKind::PinCrack, space, "no candidate PIN matched"),
        many => AttackOutcome::failure(
            AttackKind::PinCrack,
            space,
            format!("{} candidate PINs matched; recovery ambiguous", many.len()),
        ),
    }
}

/// Re-derives the link key a recovered PIN implies, for verification against
/// the true session key.
pub fn link_key_from_pin(
    transcript: &PairingTranscript,
    responder_addr: BdAddr,
    pin: &str,
) -> Option<KeyMaterial> {
    let k_init = derive_init_key(&transcript.in_rand?, responder_addr, pin).ok()?;
    Some(unmask_key(&transcript.masked_link_key?, &k_init))
}

/// Impersonation attack against a victim that bonded with the device at
/// `target_addr`. The impersonator presents the target's address, takes the
/// verifier role, challenges the victim, and accepts whatever SRES arrives
/// without ever proving knowledge of the link key itself. It succeeds when
/// the victim proceeds past authentication; a mutual-authentication policy
/// or a refused role switch forces the impersonator to answer a challenge it
/// cannot.
pub fn bias_attack(
    net: &mut SimNetwork,
    impersonator: BdAddr,
    target_addr: BdAddr,
    victim: BdAddr,
) -> AttackOutcome {
    let Some(bond_key) = net
        .device(&victim)
        .ok()
        .and_then(|d| d.bonded_key(&target_addr).copied())
    else {
        return AttackOutcome::failure(AttackKind::Bias, 0, "victim holds no bond for the target");
    };
    let policy = match net.device(&victim) {
        Ok(d) => d.policy,
        Err(e) => return AttackOutcome::failure(AttackKind::Bias, 0, e.to_string()),
    };

    if !policy.allow_role_switch {
        // The victim refuses the verifier-role grab and challenges first; the
        // impersonator has no link key to answer with.
        let au_v = match net.device_mut(&victim) {
            Ok(d) => d.draw_nonce(),
            Err(e) => return AttackOutcome::failure(AttackKind::Bias, 0, e.to_string()),
        };
        let expected = compute_sres(&au_v, target_addr, &bond_key);
        if send_recv(net, victim, target_addr, MessageKind::AuthChallenge, au_v.0.to_vec())
            .is_none()
        {
            return AttackOutcome::failure(AttackKind::Bias, 0, "challenge lost in transit");
        }
        let garbage = net
            .device_mut(&impersonator)
            .map(|d| d.draw_bytes(4))
            .unwrap_or_default();
        let accepted = send_recv(net, target_addr, victim, MessageKind::AuthResponse, garbage)
            .is_some_and(|sres| sres == expected);
        return AttackOutcome {
            attack_kind: AttackKind::Bias,
            succeeded: accepted,
            trials_used: 0,
            recovered_material: None,
            notes: "role switch refused; impersonator had to answer the victim's challenge"
                .to_string(),
        };
    }

    // Role switch granted: the impersonator becomes the verifier.
    let au_m = match net.device_mut(&impersonator) {
        Ok(d) => d.draw_nonce(),
        Err(e) => return AttackOutcome::failure(AttackKind::Bias, 0, e.to_string()),
    };
    let Some(challenge_seen) = send_recv(
        net,
        target_addr,
        victim,
        MessageKind::AuthChallenge,
        au_m.0.to_vec(),
    ) else {
        return AttackOutcome::failure(AttackKind::Bias, 0, "challenge lost in transit");
    };
    let au_seen = Nonce128::from_slice(&challenge_seen).expect("16-byte challenge");
    // The victim, as claimant, answers with its bonded key; the impersonator
    // accepts the response unseen.
    let sres_v = compute_sres(&au_seen, victim, &bond_key);
    send_recv(net, victim, target_addr, MessageKind::AuthResponse, sres_v.to_vec());

    if policy.mutual_auth {
        // The victim now challenges back; the impersonator can only guess.
        let au_v = net.device_mut(&victim).unwrap().draw_nonce();
        let expected = compute_sres(&au_v, target_addr, &bond_key);
        send_recv(
            net,
            victim,
            target_addr,
            MessageKind::MutualAuthChallenge,
            au_v.0.to_vec(),
        );
        let garbage = net.device_mut(&impersonator).unwrap().draw_bytes(4);
        let accepted = send_recv(
            net,
            target_addr,
            victim,
            MessageKind::MutualAuthResponse,
            garbage,
        )
        .is_some_and(|sres| sres == expected);
        return AttackOutcome {
            attack_kind: AttackKind::Bias,
            succeeded: accepted,
            trials_used: 0,
            recovered_material: None,
            notes: "mutual authentication challenged the impersonator".to_string(),
        };
    }

    // One-way authentication: nobody ever challenges the impersonator. Drive
    // the victim through entropy negotiation and encryption setup to show it
    // proceeds past authentication.
    let proceeded = (|| {
        let accept = send_recv(net, target_addr, victim, MessageKind::EntropyProposal, vec![16])?;
        if accept.len() != 1 || !(1..=16).contains(&accept[0]) {
            return None;
        }
        send_recv(net, victim, target_addr, MessageKind::EntropyAccept, vec![accept[0]])?;
        let dev = net.device_mut(&impersonator).ok()?;
        let cof = dev.draw_offset();
        let en = dev.draw_nonce();
        let mut body = Vec::with_capacity(28);
        body.extend_from_slice(&cof.0);
        body.extend_from_slice(&en.0);
        send_recv(net, target_addr, victim, MessageKind::EncryptionSetup, body)?;
        Some(())
    })()
    .is_some();

    AttackOutcome {
        attack_kind: AttackKind::Bias,
        succeeded: proceeded,
        trials_used: 0,
        recovered_material: None,
        notes: if proceeded {
            "one-way authentication accepted; victim proceeded past authentication".to_string()
        } else {
            "victim did not proceed".to_string()
        },
    }
}

/// Sends one message and returns the body as delivered, or `None` if it was
/// dropped or undeliverable.
fn send_recv(
    net: &mut SimNetwork,
    sender: BdAddr,
    receiver: BdAddr,
    kind: MessageKind,
    body: Vec<u8>,
) -> Option<Vec<u8>> {
    net.send(sender, receiver, kind, body).ok()?;
    net.step();
    let msg = net.recv(&receiver)?;
    (msg.kind == kind).then_some(msg.body)
}
