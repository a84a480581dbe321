//! Seeded RSA keypair generation and envelope encryption.
//!
//! Envelopes frame the plaintext as `len(4, big-endian) ‖ plaintext ‖
//! SHA-256(plaintext)[..8]`, split the frame into blocks one byte shorter
//! than the modulus, and encrypt each block independently (textbook RSA).
//! The embedded digest turns any wrong-key or corrupted decryption into an
//! explicit failure instead of silently wrong plaintext, and the absence of
//! random padding keeps ciphertexts deterministic for reproducible runs.
//! This is a simulation-grade scheme, not a production one.

use super::{hash, CryptoError};
use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::sync::LazyLock;

const PUBLIC_EXPONENT: u32 = 65537;
const FRAME_DIGEST_LEN: usize = 8;
const MILLER_RABIN_ROUNDS: usize = 24;

/// Odd primes below 10_000, used for cheap trial division before
/// Miller-Rabin.
static SMALL_PRIMES: LazyLock<Vec<u32>> = LazyLock::new(|| {
    let limit = 10_000usize;
    let mut sieve = vec![true; limit];
    let mut primes = Vec::new();
    for n in 3..limit {
        if sieve[n] {
            primes.push(n as u32);
            let mut m = n * n;
            while m < limit {
                sieve[m] = false;
                m += n;
            }
        }
    }
    primes
});

/// RSA public half: modulus and public exponent.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    e: BigUint,
    modulus_bits: u32,
}

/// RSA private half: modulus and private exponent.
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey {
    n: BigUint,
    d: BigUint,
    modulus_bits: u32,
}

/// An RSA keypair with its modulus size.
#[derive(Clone, PartialEq, Eq)]
pub struct AsymKeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
    pub modulus_bits: u32,
}

impl PublicKey {
    pub fn modulus_bits(&self) -> u32 {
        self.modulus_bits
    }

    /// Canonical byte encoding: `n_len(4) ‖ n ‖ e_len(4) ‖ e`, big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n.to_bytes_be();
        let e = self.e.to_bytes_be();
        let mut out = Vec::with_capacity(8 + n.len() + e.len());
        out.extend_from_slice(&(n.len() as u32).to_be_bytes());
        out.extend_from_slice(&n);
        out.extend_from_slice(&(e.len() as u32).to_be_bytes());
        out.extend_from_slice(&e);
        out
    }
}

impl std::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKey({} bits)", self.modulus_bits)
    }
}

impl std::fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PrivateKey({} bits)", self.modulus_bits)
    }
}

impl std::fmt::Debug for AsymKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AsymKeyPair({} bits)", self.modulus_bits)
    }
}

fn random_below(rng: &mut ChaCha20Rng, bound: &BigUint) -> BigUint {
    let bytes = (bound.bits() as usize).div_ceil(8);
    loop {
        let mut buf = vec![0u8; bytes];
        rng.fill_bytes(&mut buf);
        let candidate = BigUint::from_bytes_be(&buf);
        if &candidate < bound {
            return candidate;
        }
    }
}

fn is_probably_prime(n: &BigUint, rng: &mut ChaCha20Rng) -> bool {
    for &p in SMALL_PRIMES.iter() {
        let p = BigUint::from(p);
        if (n % &p).is_zero() {
            return n == &p;
        }
    }

    let one = BigUint::one();
    let two = BigUint::from(2u32);
    let n_minus_1 = n - &one;
    let mut d = n_minus_1.clone();
    let mut s = 0u32;
    while (&d % &two).is_zero() {
        d >>= 1;
        s += 1;
    }

    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = random_below(rng, &(n - BigUint::from(3u32))) + &two;
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 0..s - 1 {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn generate_prime(bits: u32, rng: &mut ChaCha20Rng) -> BigUint {
    let bytes = (bits / 8) as usize;
    loop {
        let mut buf = vec![0u8; bytes];
        rng.fill_bytes(&mut buf);
        // Top two bits set so the product has exactly 2*bits bits; low bit
        // set for oddness.
        buf[0] |= 0xc0;
        buf[bytes - 1] |= 0x01;
        let candidate = BigUint::from_bytes_be(&buf);
        if is_probably_prime(&candidate, rng) {
            return candidate;
        }
    }
}

/// Generates an RSA keypair of `modulus_bits` (1024 or 2048) from a seeded
/// generator. The same seed always yields byte-identical keys.
pub fn generate_keypair(modulus_bits: u32, rng_seed: u64) -> Result<AsymKeyPair, CryptoError> {
    if modulus_bits != 1024 && modulus_bits != 2048 {
        return Err(CryptoError::UnsupportedModulusBits(modulus_bits));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let e = BigUint::from(PUBLIC_EXPONENT);
    loop {
        let p = generate_prime(modulus_bits / 2, &mut rng);
        let q = generate_prime(modulus_bits / 2, &mut rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - BigUint::one()) * (&q - BigUint::one());
        let Some(d) = e.modinv(&phi) else {
            continue;
        };
        debug_assert_eq!(n.bits(), modulus_bits as u64);
        return Ok(AsymKeyPair {
            public: PublicKey {
                n: n.clone(),
                e,
                modulus_bits,
            },
            private: PrivateKey {
                n,
                d,
                modulus_bits,
            },
            modulus_bits,
        });
    }
}

fn modulus_bytes(bits: u32) -> usize {
    (bits / 8) as usize
}

/// Largest plaintext frame chunk a single RSA block can carry.
fn chunk_len(bits: u32) -> usize {
    modulus_bytes(bits) - 1
}

/// Largest plaintext accepted by [`envelope_encrypt_unchunked`].
pub fn max_single_block_plaintext(modulus_bits: u32) -> usize {
    chunk_len(modulus_bits) - 4 - FRAME_DIGEST_LEN
}

fn frame(plaintext: &[u8]) -> Vec<u8> {
    let digest = hash(plaintext);
    let mut framed = Vec::with_capacity(4 + plaintext.len() + FRAME_DIGEST_LEN);
    framed.extend_from_slice(&(plaintext.len() as u32).to_be_bytes());
    framed.extend_from_slice(plaintext);
    framed.extend_from_slice(&digest.0[..FRAME_DIGEST_LEN]);
    framed
}

fn unframe(framed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if framed.len() < 4 + FRAME_DIGEST_LEN {
        return Err(CryptoError::DecryptionFailed);
    }
    let len = u32::from_be_bytes(framed[..4].try_into().unwrap()) as usize;
    if framed.len() < 4 + len + FRAME_DIGEST_LEN {
        return Err(CryptoError::DecryptionFailed);
    }
    let plaintext = &framed[4..4 + len];
    let digest = hash(plaintext);
    if framed[4 + len..4 + len + FRAME_DIGEST_LEN] != digest.0[..FRAME_DIGEST_LEN] {
        return Err(CryptoError::DecryptionFailed);
    }
    Ok(plaintext.to_vec())
}

fn encrypt_frame(framed: &[u8], public_key: &PublicKey) -> Vec<u8> {
    let chunk = chunk_len(public_key.modulus_bits);
    let block = modulus_bytes(public_key.modulus_bits);
    let mut out = Vec::with_capacity(framed.len().div_ceil(chunk) * block);
    for piece in framed.chunks(chunk) {
        let mut padded = vec![0u8; chunk];
        padded[..piece.len()].copy_from_slice(piece);
        let m = BigUint::from_bytes_be(&padded);
        let c = m.modpow(&public_key.e, &public_key.n);
        let c_bytes = c.to_bytes_be();
        out.resize(out.len() + block - c_bytes.len(), 0);
        out.extend_from_slice(&c_bytes);
    }
    out
}

/// Encrypts `plaintext` to `public_key`, chunking across as many RSA blocks
/// as needed. Only the matching private key can recover it.
pub fn envelope_encrypt(plaintext: &[u8], public_key: &PublicKey) -> Vec<u8> {
    encrypt_frame(&frame(plaintext), public_key)
}

/// Single-block variant of [`envelope_encrypt`]; errors instead of chunking
/// when the framed plaintext does not fit one RSA block.
pub fn envelope_encrypt_unchunked(
    plaintext: &[u8],
    public_key: &PublicKey,
) -> Result<Vec<u8>, CryptoError> {
    let max = max_single_block_plaintext(public_key.modulus_bits);
    if plaintext.len() > max {
        return Err(CryptoError::PlaintextTooLarge {
            len: plaintext.len(),
            max,
        });
    }
    Ok(encrypt_frame(&frame(plaintext), public_key))
}

/// Decrypts an [`envelope_encrypt`] ciphertext. Any wrong key, truncation,
/// or corrupted byte yields `DecryptionFailed`, never wrong plaintext.
pub fn envelope_decrypt(
    ciphertext: &[u8],
    private_key: &PrivateKey,
) -> Result<Vec<u8>, CryptoError> {
    let block = modulus_bytes(private_key.modulus_bits);
    let chunk = chunk_len(private_key.modulus_bits);
    if ciphertext.is_empty() || !ciphertext.len().is_multiple_of(block) {
        return Err(CryptoError::MalformedCiphertext);
    }
    let mut framed = Vec::with_capacity(ciphertext.len() / block * chunk);
    for piece in ciphertext.chunks(block) {
        let c = BigUint::from_bytes_be(piece);
        let m = c.modpow(&private_key.d, &private_key.n);
        let m_bytes = m.to_bytes_be();
        if m_bytes.len() > chunk {
            // Recovered integer does not fit the chunk width: wrong key or
            // tampered block.
            return Err(CryptoError::DecryptionFailed);
        }
        framed.resize(framed.len() + chunk - m_bytes.len(), 0);
        framed.extend_from_slice(&m_bytes);
    }
    unframe(&framed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::CASE_STUDY_PAYLOAD;

    fn test_pair() -> &'static AsymKeyPair {
        static PAIR: LazyLock<AsymKeyPair> =
            LazyLock::new(|| generate_keypair(1024, 0xfeed).unwrap());
        &PAIR
    }

    fn other_pair() -> &'static AsymKeyPair {
        static PAIR: LazyLock<AsymKeyPair> =
            LazyLock::new(|| generate_keypair(1024, 0xbeef).unwrap());
        &PAIR
    }

    #[test]
    fn keygen_is_deterministic() {
        let a = generate_keypair(1024, 7).unwrap();
        let b = generate_keypair(1024, 7).unwrap();
        assert_eq!(a.public.to_bytes(), b.public.to_bytes());
        assert_eq!(a.private.d, b.private.d);
        let c = generate_keypair(1024, 8).unwrap();
        assert_ne!(a.public.to_bytes(), c.public.to_bytes());
    }

    #[test]
    fn keygen_rejects_unsupported_sizes() {
        assert_eq!(
            generate_keypair(512, 1).unwrap_err(),
            CryptoError::UnsupportedModulusBits(512)
        );
    }

    #[test]
    fn public_and_private_halves_differ() {
        let pair = test_pair();
        assert_ne!(pair.public.e, pair.private.d);
    }

    #[test]
    fn round_trip_32_bytes() {
        let pair = test_pair();
        let msg = [0xabu8; 32];
        let ct = envelope_encrypt(&msg, &pair.public);
        assert_eq!(envelope_decrypt(&ct, &pair.private).unwrap(), msg);
    }

    #[test]
    fn round_trip_case_study_payload() {
        let pair = test_pair();
        let ct = envelope_encrypt(CASE_STUDY_PAYLOAD, &pair.public);
        assert_ne!(&ct, CASE_STUDY_PAYLOAD);
        assert_eq!(
            envelope_decrypt(&ct, &pair.private).unwrap(),
            CASE_STUDY_PAYLOAD
        );
    }

    #[test]
    fn round_trip_empty_plaintext() {
        let pair = test_pair();
        let ct = envelope_encrypt(b"", &pair.public);
        assert!(!ct.is_empty());
        assert_eq!(envelope_decrypt(&ct, &pair.private).unwrap(), b"");
    }

    #[test]
    fn round_trip_multi_block() {
        let pair = test_pair();
        let msg: Vec<u8> = (0..500u32).map(|i| i as u8).collect();
        let ct = envelope_encrypt(&msg, &pair.public);
        assert!(ct.len() > 128);
        assert_eq!(envelope_decrypt(&ct, &pair.private).unwrap(), msg);
    }

    #[test]
    fn wrong_key_fails() {
        let ct = envelope_encrypt(b"secret", &test_pair().public);
        assert_eq!(
            envelope_decrypt(&ct, &other_pair().private).unwrap_err(),
            CryptoError::DecryptionFailed
        );
    }

    #[test]
    fn every_single_byte_flip_fails() {
        let pair = test_pair();
        let ct = envelope_encrypt(b"integrity", &pair.public);
        for i in 0..ct.len() {
            let mut tampered = ct.clone();
            tampered[i] ^= 0x01;
            assert!(
                envelope_decrypt(&tampered, &pair.private).is_err(),
                "flip at byte {i} went undetected"
            );
        }
    }

    #[test]
    fn truncated_ciphertext_is_malformed() {
        let pair = test_pair();
        let ct = envelope_encrypt(b"x", &pair.public);
        assert_eq!(
            envelope_decrypt(&ct[..ct.len() - 1], &pair.private).unwrap_err(),
            CryptoError::MalformedCiphertext
        );
    }

    #[test]
    fn unchunked_rejects_oversized_plaintext() {
        let pair = test_pair();
        let max = max_single_block_plaintext(1024);
        assert!(envelope_encrypt_unchunked(&vec![0u8; max], &pair.public).is_ok());
        assert!(matches!(
            envelope_encrypt_unchunked(&vec![0u8; max + 1], &pair.public),
            Err(CryptoError::PlaintextTooLarge { .. })
        ));
    }
}
