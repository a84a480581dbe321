#!/usr/bin/env python3
"""Independent re-verification of exported chains and KDF golden vectors.

Implements only the canonical byte encodings and SHA-256, nothing from the
simulator itself:

  init key        "INIT" || in_rand(16) || bd_addr(6) || pin_len(1) || pin  -> digest[:16]
  link key        "LINK" || lk_rand(16) || bd_addr(6)                       -> digest[:16]
  sres            "AUTH" || au_rand(16) || claimant(6) || k_link(16)        -> digest[:4]
  enc key         "ENCR" || k_link(16) || cof(12) || en_rand(16)            -> digest[:16],
                  truncated to the entropy and zero-padded to 16
  keystream block k_enc(16) || counter(8, big-endian)                       -> digest (32)
  block hash      index(8) || prev_hash(32) || header(21) || len(8) || body -> digest (32)

Chain export lines are `index,prev_hash,payload,block_hash` where the hex
payload column is the 21-byte header followed by the envelope ciphertext.

Usage: oracle_check.py VECTORS_JSON CHAIN_EXPORT
Exits 0 only when every vector and every block re-verifies.
"""

import hashlib
import json
import sys


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def kdf_init(in_rand: bytes, bd_addr: bytes, pin: str) -> bytes:
    pre = b"INIT" + in_rand + bd_addr + bytes([len(pin)]) + pin.encode()
    return sha256(pre)[:16]


def kdf_link(lk_rand: bytes, bd_addr: bytes) -> bytes:
    return sha256(b"LINK" + lk_rand + bd_addr)[:16]


def kdf_sres(au_rand: bytes, claimant: bytes, k_link: bytes) -> bytes:
    return sha256(b"AUTH" + au_rand + claimant + k_link)[:4]


def kdf_encr(k_link: bytes, cof: bytes, en_rand: bytes, entropy: int) -> bytes:
    full = sha256(b"ENCR" + k_link + cof + en_rand)[:16]
    return full[:entropy] + b"\x00" * (16 - entropy)


def keystream_block(k_enc: bytes, counter: int) -> bytes:
    return sha256(k_enc + counter.to_bytes(8, "big"))


def check_vectors(path):
    mismatches = 0
    with open(path) as f:
        vectors = json.load(f)
    for i, v in enumerate(vectors):
        kind = v["kind"]
        if kind == "init":
            got = kdf_init(bytes.fromhex(v["in_rand"]), bytes.fromhex(v["bd_addr"]), v["pin"])
        elif kind == "link":
            got = kdf_link(bytes.fromhex(v["lk_rand"]), bytes.fromhex(v["bd_addr"]))
        elif kind == "auth":
            got = kdf_sres(
                bytes.fromhex(v["au_rand"]),
                bytes.fromhex(v["claimant"]),
                bytes.fromhex(v["k_link"]),
            )
        elif kind == "encr":
            got = kdf_encr(
                bytes.fromhex(v["k_link"]),
                bytes.fromhex(v["cof"]),
                bytes.fromhex(v["en_rand"]),
                v["entropy"],
            )
        elif kind == "keystream":
            got = keystream_block(bytes.fromhex(v["k_enc"]), v["counter"])
        else:
            print(f"vector {i}: unknown kind {kind!r}")
            mismatches += 1
            continue
        if got.hex() != v["expect"]:
            print(f"vector {i} ({kind}): expected {v['expect']}, recomputed {got.hex()}")
            mismatches += 1
    return len(vectors), mismatches


def check_chain(path):
    mismatches = 0
    prev_hash = b"\x00" * 32
    blocks = 0
    with open(path) as f:
        lines = [line for line in f.read().splitlines() if line]
    for lineno, line in enumerate(lines):
        index_s, prev_s, payload_s, hash_s = line.split(",")
        index = int(index_s)
        prev = bytes.fromhex(prev_s)
        payload = bytes.fromhex(payload_s)
        block_hash = bytes.fromhex(hash_s)
        header, body = payload[:21], payload[21:]

        ok = True
        if index != lineno:
            print(f"block {lineno}: index {index} out of sequence")
            ok = False
        if prev != prev_hash:
            print(f"block {lineno}: broken back-link")
            ok = False
        if lineno == 0 and (header != b"\x00" * 21 or body):
            print("block 0: genesis must carry an all-zero header and no body")
            ok = False
        preimage = (
            index.to_bytes(8, "big")
            + prev
            + header
            + len(body).to_bytes(8, "big")
            + body
        )
        if sha256(preimage) != block_hash:
            print(f"block {lineno}: stored hash does not recompute")
            ok = False
        if not ok:
            mismatches += 1
        prev_hash = block_hash
        blocks += 1
    return blocks, mismatches


def main():
    if len(sys.argv) != 3:
        print(__doc__)
        return 2
    vectors, v_bad = check_vectors(sys.argv[1])
    blocks, c_bad = check_chain(sys.argv[2])
    total = v_bad + c_bad
    print(f"vectors checked: {vectors}, chain blocks checked: {blocks}, mismatches: {total}")
    return 0 if total == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
