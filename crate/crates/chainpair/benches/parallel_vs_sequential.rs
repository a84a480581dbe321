//! Compares the rayon-backed search and batch primitives against their
//! sequential counterparts on the simulator's real workloads: brute-force
//! key recovery, PIN-candidate scans, chain validation, and whole scenario
//! batches.

use chainpair::adversary::{brute_force_enc_key, candidate_key};
use chainpair::crypto::{
    compute_sres, derive_init_key, stream_encrypt, unmask_key, BdAddr, KeyMaterial, Nonce128,
};
use chainpair::exec;
use chainpair::ledger::{
    consensus_commit, propose_block, validate_chain, Chain, MemberRegistry, PayloadHeader,
};
use chainpair::netsim::MessageKind;
use chainpair::pairing::frame_payload;
use chainpair::scenario::{run_single, ScenarioConfig, ScenarioKind};
use criterion::{criterion_group, criterion_main, Criterion};

fn bench_brute_force(c: &mut Criterion) {
    // A two-byte-entropy key planted mid-space: the sequential scan walks
    // half the candidates before hitting it.
    let key = candidate_key(0x8000, 2);
    let frame = frame_payload(b"bench payload for the key search");
    let ciphertext = stream_encrypt(&key, 0, &frame);

    let mut group = c.benchmark_group("brute_force_entropy2");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            exec::find_first(1 << 16, |i| {
                stream_encrypt(&candidate_key(i, 2), 0, &ciphertext) == frame
            })
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            exec::find_first_seq(1 << 16, |i| {
                stream_encrypt(&candidate_key(i, 2), 0, &ciphertext) == frame
            })
        })
    });
    group.bench_function("adversary_api", |b| {
        b.iter(|| brute_force_enc_key(&ciphertext, &frame, 0, 2))
    });
    group.finish();
}

fn bench_pin_scan(c: &mut Criterion) {
    // A synthetic transcript with a known 4-digit PIN.
    let in_rand = Nonce128([7; 16]);
    let au_rand = Nonce128([9; 16]);
    let responder = BdAddr([0xb0, 1, 2, 3, 4, 5]);
    let k_init = derive_init_key(&in_rand, responder, "4711").unwrap();
    let k_link = KeyMaterial::full([0x5a; 16]);
    let masked = chainpair::crypto::mask_key(&k_link, &k_init);
    let sres = compute_sres(&au_rand, responder, &k_link);

    let scan = |n: u64| {
        let pin = format!("{n:04}");
        let candidate_init = derive_init_key(&in_rand, responder, &pin).unwrap();
        let candidate_link = unmask_key(&masked, &candidate_init);
        compute_sres(&au_rand, responder, &candidate_link) == sres
    };

    let mut group = c.benchmark_group("pin_scan_10000");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| exec::collect_matches(10_000, scan)));
    group.bench_function("sequential", |b| {
        b.iter(|| exec::collect_matches_seq(10_000, scan))
    });
    group.finish();
}

fn bench_chain_validation(c: &mut Criterion) {
    let a = BdAddr([1; 6]);
    let b = BdAddr([2; 6]);
    let pair = chainpair::crypto::generate_keypair(1024, 99).unwrap();
    let mut registry = MemberRegistry::new();
    registry.register(a, pair.public.clone()).unwrap();
    registry.register(b, pair.public).unwrap();
    let mut replicas = vec![Chain::new()];
    for i in 0..256u64 {
        let header = PayloadHeader {
            sender: a,
            receiver: b,
            msg_kind: MessageKind::SetupPayload,
            seq: i,
        };
        let block = propose_block(&replicas[0], &registry, header, vec![0xab; 160]).unwrap();
        consensus_commit(&mut replicas, &registry, &block, 0);
    }
    let chain = replicas.pop().unwrap();

    let mut group = c.benchmark_group("validate_chain_257_blocks");
    group.sample_size(20);
    group.bench_function("parallel", |b| b.iter(|| validate_chain(&chain)));
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let blocks = chain.blocks();
            (0..blocks.len()).all(|i| {
                let block = &blocks[i];
                let linked = if i == 0 {
                    block.index == 0
                } else {
                    block.index == i as u64 && block.prev_hash == blocks[i - 1].block_hash
                };
                linked && block.verify_hash()
            })
        })
    });
    group.finish();
}

fn bench_scenario_batch(c: &mut Criterion) {
    let config = ScenarioConfig {
        runs: 8,
        ..ScenarioConfig::new(ScenarioKind::AttackKnob)
    };

    let mut group = c.benchmark_group("knob_batch_8_runs");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| exec::map_indexed(8, |i| run_single(&config, i as u32)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| exec::map_indexed_seq(8, |i| run_single(&config, i as u32)))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_brute_force,
    bench_pin_scan,
    bench_chain_validation,
    bench_scenario_batch
);
criterion_main!(benches);
