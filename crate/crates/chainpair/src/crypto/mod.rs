//! Cryptographic primitives for the simulator: SHA-256 hashing, the
//! domain-separated key-derivation functions of legacy pairing, a
//! hash-counter stream cipher, and seeded RSA envelope encryption.
//!
//! Every derivation hashes a frozen, bit-exact preimage so that golden
//! vectors survive refactors and can be re-verified by an independent
//! implementation. The canonical encodings are:
//!
//! | derivation      | preimage                                                    | output        |
//! |-----------------|-------------------------------------------------------------|---------------|
//! | init key        | `"INIT"` ‖ in_rand(16) ‖ bd_addr(6) ‖ pin_len(1) ‖ pin      | digest[..16]  |
//! | link key        | `"LINK"` ‖ lk_rand(16) ‖ bd_addr(6)                         | digest[..16]  |
//! | SRES            | `"AUTH"` ‖ au_rand(16) ‖ claimant_addr(6) ‖ k_link(16)      | digest[..4]   |
//! | encryption key  | `"ENCR"` ‖ k_link(16) ‖ cof(12) ‖ en_rand(16)               | digest[..16]  |
//! | keystream block | k_enc(16) ‖ counter(8, big-endian)                          | digest (32)   |
//!
//! All multi-byte integers are big-endian. These are simulation-grade
//! constructions, not the real Bluetooth E-series algorithms, and none of
//! them are constant-time.

mod rsa;

pub use rsa::{
    envelope_decrypt, envelope_encrypt, envelope_encrypt_unchunked, generate_keypair,
    max_single_block_plaintext, AsymKeyPair, PrivateKey, PublicKey,
};

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Length of every symmetric key in the simulation, in bytes.
pub const KEY_LEN: usize = 16;

/// Upper bound of the negotiable entropy range, in bytes.
pub const MAX_ENTROPY_BYTES: u8 = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unsupported RSA modulus size: {0} bits (expected 1024 or 2048)")]
    UnsupportedModulusBits(u32),
    #[error("length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("PIN must be 1 to 16 ASCII digits")]
    InvalidPin,
    #[error("entropy must be between 1 and 16 bytes, got {0}")]
    EntropyOutOfRange(u8),
    #[error("plaintext of {len} bytes exceeds the {max}-byte single-block limit")]
    PlaintextTooLarge { len: usize, max: usize },
    #[error("ciphertext is not a whole number of RSA blocks")]
    MalformedCiphertext,
    #[error("decryption failed")]
    DecryptionFailed,
}

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct HashDigest(pub [u8; 32]);

impl HashDigest {
    pub const ZERO: HashDigest = HashDigest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<HashDigest> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(HashDigest(arr))
    }
}

impl std::fmt::Debug for HashDigest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "HashDigest({})", self.to_hex())
    }
}

/// A 128-bit on-air random value (IN_RAND, LK_RAND, AU_RAND, EN_RAND).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Nonce128(pub [u8; 16]);

impl Nonce128 {
    pub fn from_slice(bytes: &[u8]) -> Option<Nonce128> {
        bytes.try_into().ok().map(Nonce128)
    }
}

/// The 96-bit ciphering offset fed into encryption-key derivation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Offset96(pub [u8; 12]);

impl Offset96 {
    pub fn from_slice(bytes: &[u8]) -> Option<Offset96> {
        bytes.try_into().ok().map(Offset96)
    }
}

/// A 48-bit Bluetooth device address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BdAddr(pub [u8; 6]);

impl BdAddr {
    pub const ZERO: BdAddr = BdAddr([0u8; 6]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<BdAddr> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 6] = bytes.try_into().ok()?;
        Some(BdAddr(arr))
    }
}

impl std::fmt::Display for BdAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let b = &self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl std::fmt::Debug for BdAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BdAddr({self})")
    }
}

/// 16 bytes of key material together with its declared entropy.
///
/// Bytes past `declared_entropy_bytes` are always zero; reduced-entropy keys
/// therefore live in a 256^entropy search space.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct KeyMaterial {
    bytes: [u8; KEY_LEN],
    declared_entropy_bytes: u8,
}

impl KeyMaterial {
    /// Full-entropy key material.
    pub fn full(bytes: [u8; KEY_LEN]) -> KeyMaterial {
        KeyMaterial {
            bytes,
            declared_entropy_bytes: MAX_ENTROPY_BYTES,
        }
    }

    /// Truncates `bytes` to `entropy_bytes` significant bytes and zero-pads
    /// the tail.
    pub fn with_entropy(bytes: [u8; KEY_LEN], entropy_bytes: u8) -> Result<KeyMaterial, CryptoError> {
        if entropy_bytes == 0 || entropy_bytes > MAX_ENTROPY_BYTES {
            return Err(CryptoError::EntropyOutOfRange(entropy_bytes));
        }
        let mut reduced = [0u8; KEY_LEN];
        reduced[..entropy_bytes as usize].copy_from_slice(&bytes[..entropy_bytes as usize]);
        Ok(KeyMaterial {
            bytes: reduced,
            declared_entropy_bytes: entropy_bytes,
        })
    }

    pub fn bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }

    pub fn declared_entropy_bytes(&self) -> u8 {
        self.declared_entropy_bytes
    }
}

impl std::fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "KeyMaterial({}, entropy={})",
            hex::encode(self.bytes),
            self.declared_entropy_bytes
        )
    }
}

/// SHA-256 of `data`.
pub fn hash(data: &[u8]) -> HashDigest {
    HashDigest(Sha256::digest(data).into())
}

/// Element-wise XOR of two equal-length byte slices.
pub fn xor_combine(a: &[u8], b: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if a.len() != b.len() {
        return Err(CryptoError::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x ^ y).collect())
}

fn xor_key(a: &[u8; KEY_LEN], b: &[u8; KEY_LEN]) -> [u8; KEY_LEN] {
    let mut out = [0u8; KEY_LEN];
    for i in 0..KEY_LEN {
        out[i] = a[i] ^ b[i];
    }
    out
}

/// XOR of two 16-byte keys, used to mask the link key in transit.
pub fn mask_key(key: &KeyMaterial, mask: &KeyMaterial) -> [u8; KEY_LEN] {
    xor_key(key.bytes(), mask.bytes())
}

/// Recovers a key from its masked form: `unmask(mask_key(k, m), m) == k`.
pub fn unmask_key(masked: &[u8; KEY_LEN], mask: &KeyMaterial) -> KeyMaterial {
    KeyMaterial::full(xor_key(masked, mask.bytes()))
}

fn digest_prefix(preimage: &[u8]) -> [u8; KEY_LEN] {
    let d = hash(preimage);
    let mut out = [0u8; KEY_LEN];
    out.copy_from_slice(&d.0[..KEY_LEN]);
    out
}

fn pin_is_valid(pin: &str) -> bool {
    !pin.is_empty() && pin.len() <= 16 && pin.bytes().all(|b| b.is_ascii_digit())
}

/// Derives the initialization key from the in-band random value, the
/// responder address, and the user PIN (1 to 16 ASCII digits).
pub fn derive_init_key(
    in_rand: &Nonce128,
    bd_addr: BdAddr,
    pin: &str,
) -> Result<KeyMaterial, CryptoError> {
    if !pin_is_valid(pin) {
        return Err(CryptoError::InvalidPin);
    }
    let mut preimage = Vec::with_capacity(4 + 16 + 6 + 1 + pin.len());
    preimage.extend_from_slice(b"INIT");
    preimage.extend_from_slice(&in_rand.0);
    preimage.extend_from_slice(&bd_addr.0);
    preimage.push(pin.len() as u8);
    preimage.extend_from_slice(pin.as_bytes());
    Ok(KeyMaterial::full(digest_prefix(&preimage)))
}

/// Derives the long-term link key from a random value and the responder
/// address.
pub fn derive_link_key(lk_rand: &Nonce128, bd_addr: BdAddr) -> KeyMaterial {
    let mut preimage = Vec::with_capacity(4 + 16 + 6);
    preimage.extend_from_slice(b"LINK");
    preimage.extend_from_slice(&lk_rand.0);
    preimage.extend_from_slice(&bd_addr.0);
    KeyMaterial::full(digest_prefix(&preimage))
}

/// The claimant's 4-byte challenge response.
pub fn compute_sres(au_rand: &Nonce128, claimant_addr: BdAddr, k_link: &KeyMaterial) -> [u8; 4] {
    let mut preimage = Vec::with_capacity(4 + 16 + 6 + KEY_LEN);
    preimage.extend_from_slice(b"AUTH");
    preimage.extend_from_slice(&au_rand.0);
    preimage.extend_from_slice(&claimant_addr.0);
    preimage.extend_from_slice(k_link.bytes());
    let d = hash(&preimage);
    [d.0[0], d.0[1], d.0[2], d.0[3]]
}

/// Derives the session encryption key at the negotiated entropy. The full
/// 16-byte derivation is truncated to `entropy_bytes` and zero-padded.
pub fn derive_enc_key(
    k_link: &KeyMaterial,
    cof: &Offset96,
    en_rand: &Nonce128,
    entropy_bytes: u8,
) -> Result<KeyMaterial, CryptoError> {
    if entropy_bytes == 0 || entropy_bytes > MAX_ENTROPY_BYTES {
        return Err(CryptoError::EntropyOutOfRange(entropy_bytes));
    }
    let mut preimage = Vec::with_capacity(4 + KEY_LEN + 12 + 16);
    preimage.extend_from_slice(b"ENCR");
    preimage.extend_from_slice(k_link.bytes());
    preimage.extend_from_slice(&cof.0);
    preimage.extend_from_slice(&en_rand.0);
    KeyMaterial::with_entropy(digest_prefix(&preimage), entropy_bytes)
}

/// XORs `payload` with keystream blocks `SHA-256(k_enc ‖ counter_i)` where
/// `counter_i = counter_start + i`. Applying the same call again decrypts.
pub fn stream_encrypt(k_enc: &KeyMaterial, counter_start: u64, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len());
    for (i, chunk) in payload.chunks(32).enumerate() {
        let mut preimage = [0u8; KEY_LEN + 8];
        preimage[..KEY_LEN].copy_from_slice(k_enc.bytes());
        preimage[KEY_LEN..].copy_from_slice(&counter_start.wrapping_add(i as u64).to_be_bytes());
        let block = hash(&preimage);
        out.extend(chunk.iter().zip(block.0.iter()).map(|(p, k)| p ^ k));
    }
    out
}

/// Number of 32-byte keystream blocks a payload of `len` bytes consumes.
pub fn keystream_blocks(len: usize) -> u64 {
    len.div_ceil(32) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n16(byte: u8) -> Nonce128 {
        Nonce128([byte; 16])
    }

    #[test]
    fn hash_is_deterministic() {
        assert_eq!(hash(b"pairing"), hash(b"pairing"));
    }

    #[test]
    fn hash_bit_flip_changes_digest() {
        // Reference digests recomputed with an independent SHA-256.
        let a = hash(&[0u8; 8]);
        let b = hash(&[0x01, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(
            a.to_hex(),
            "af5570f5a1810b7af78caf4bc70a660f0df51e42baf91d4de5b2328de0e83dfc"
        );
        assert_eq!(
            b.to_hex(),
            "7c9fa136d4413fa6173637e883b6998d32e1d675f88cddff9dcbcf331820f4b8"
        );
        assert_ne!(a, b);
    }

    #[test]
    fn hash_empty_matches_published_vector() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn xor_self_inverse_is_zero() {
        let k = [0x5au8; 16];
        assert_eq!(xor_combine(&k, &k).unwrap(), vec![0u8; 16]);
    }

    #[test]
    fn xor_recovers_link_key() {
        let k_link = KeyMaterial::full([0x17; 16]);
        let k_init = KeyMaterial::full([0xc3; 16]);
        let masked = mask_key(&k_link, &k_init);
        assert_eq!(unmask_key(&masked, &k_init), k_link);
    }

    #[test]
    fn xor_length_mismatch_is_error() {
        assert_eq!(
            xor_combine(&[0u8; 16], &[0u8; 12]),
            Err(CryptoError::LengthMismatch {
                expected: 16,
                actual: 12
            })
        );
    }

    #[test]
    fn init_key_is_deterministic() {
        let a = derive_init_key(&n16(7), BdAddr([1; 6]), "1234").unwrap();
        let b = derive_init_key(&n16(7), BdAddr([1; 6]), "1234").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.declared_entropy_bytes(), 16);
    }

    #[test]
    fn init_key_golden_vectors() {
        // Frozen from an independent script over the canonical preimage.
        let zero = derive_init_key(&n16(0), BdAddr::ZERO, "0000").unwrap();
        assert_eq!(hex::encode(zero.bytes()), "d23558b1d09b93e01c74765dc9621f35");
        let other_pin = derive_init_key(&n16(0), BdAddr::ZERO, "0001").unwrap();
        assert_eq!(
            hex::encode(other_pin.bytes()),
            "08c7ed0a3da9e72a95de6a7d078a1523"
        );
        assert_ne!(zero, other_pin);
    }

    #[test]
    fn init_key_rejects_bad_pins() {
        let addr = BdAddr::ZERO;
        assert_eq!(
            derive_init_key(&n16(0), addr, "").unwrap_err(),
            CryptoError::InvalidPin
        );
        assert_eq!(
            derive_init_key(&n16(0), addr, "12a4").unwrap_err(),
            CryptoError::InvalidPin
        );
        assert_eq!(
            derive_init_key(&n16(0), addr, "01234567890123456").unwrap_err(),
            CryptoError::InvalidPin
        );
    }

    #[test]
    fn link_key_golden_vectors() {
        let mut rand = [0u8; 16];
        for (i, b) in rand.iter_mut().enumerate() {
            *b = i as u8;
        }
        let lk_rand = Nonce128(rand);
        let a = derive_link_key(&lk_rand, BdAddr::from_hex("112233445566").unwrap());
        let b = derive_link_key(&lk_rand, BdAddr::from_hex("112233445567").unwrap());
        assert_eq!(hex::encode(a.bytes()), "a3ede916534628430634b9ec16abf9fa");
        assert_eq!(hex::encode(b.bytes()), "07770b1a5956e075f0c2475a428979e5");
        assert_eq!(a, derive_link_key(&lk_rand, BdAddr::from_hex("112233445566").unwrap()));
    }

    #[test]
    fn sres_golden_vectors() {
        let au = n16(0xaa);
        let addr = BdAddr::from_hex("010203040506").unwrap();
        let k_link = KeyMaterial::full([0x11; 16]);
        assert_eq!(compute_sres(&au, addr, &k_link), [0xa8, 0x5e, 0x2e, 0x4e]);

        let mut other = [0x11; 16];
        other[15] = 0x12;
        let k_other = KeyMaterial::full(other);
        assert_eq!(compute_sres(&au, addr, &k_other), [0x2f, 0xe7, 0xd2, 0xba]);
    }

    #[test]
    fn enc_key_golden_vector_and_reduction() {
        let k_link = KeyMaterial::full([0x11; 16]);
        let cof = Offset96([0x22; 12]);
        let en = n16(0x33);
        let full = derive_enc_key(&k_link, &cof, &en, 16).unwrap();
        assert_eq!(hex::encode(full.bytes()), "dad97743e8c268cf4672d81198f387e1");

        let reduced = derive_enc_key(&k_link, &cof, &en, 1).unwrap();
        assert_eq!(reduced.bytes()[0], full.bytes()[0]);
        assert!(reduced.bytes()[1..].iter().all(|&b| b == 0));
        assert_eq!(reduced.declared_entropy_bytes(), 1);

        assert_eq!(
            derive_enc_key(&k_link, &cof, &en, 0).unwrap_err(),
            CryptoError::EntropyOutOfRange(0)
        );
        assert_eq!(
            derive_enc_key(&k_link, &cof, &en, 17).unwrap_err(),
            CryptoError::EntropyOutOfRange(17)
        );
    }

    #[test]
    fn stream_cipher_is_involution() {
        let k = KeyMaterial::full([0x44; 16]);
        let payload = b"a message that spans more than one keystream block......";
        let ct = stream_encrypt(&k, 9, payload);
        assert_ne!(&ct, payload);
        assert_eq!(stream_encrypt(&k, 9, &ct), payload);
    }

    #[test]
    fn stream_cipher_empty_payload() {
        let k = KeyMaterial::full([0; 16]);
        assert!(stream_encrypt(&k, 0, &[]).is_empty());
    }

    #[test]
    fn stream_cipher_golden_first_block() {
        // Zero key, counter 0, 16 zero bytes: ciphertext equals the first
        // half of SHA-256(24 zero bytes).
        let k = KeyMaterial::full([0; 16]);
        let ct = stream_encrypt(&k, 0, &[0u8; 16]);
        assert_eq!(hex::encode(ct), "9d908ecfb6b256def8b49a7c504e6c88");
    }
}
