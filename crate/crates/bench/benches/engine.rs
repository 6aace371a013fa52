use criterion::{black_box, criterion_group, criterion_main, Criterion, Throughput};
use icsfuzz_bench::{frames, modbus, seed};
use icsfuzz_core::kb::{KnowledgeStore, Retriever};
use icsfuzz_core::metrics::{compute_report, Ledger, LedgerRecord};
use icsfuzz_core::mutation::{generate_batch, EngineConfig, MutationStrategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mutation(c: &mut Criterion) {
    let spec = modbus();
    let seeds: Vec<_> = frames(&spec, 16).iter().map(|b| seed(&spec, b)).collect();
    let strategy = MutationStrategy::for_spec(&spec, 0.1, 0.5, 1.0);
    let cfg = EngineConfig::default();
    let mut g = c.benchmark_group("mutation");
    g.throughput(Throughput::Elements(32 * seeds.len() as u64));
    g.bench_function("batch_32", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.iter(|| {
            for s in &seeds {
                black_box(generate_batch(s, &spec, &strategy, &cfg, 32, &mut rng));
            }
        })
    });
    g.finish();
}

fn retrieval(c: &mut Criterion) {
    let kb = KnowledgeStore::load(icsfuzz_bench::fixture("modbus_kb.jsonl")).unwrap();
    c.bench_function("kb_retrieve", |b| b.iter(|| black_box(kb.retrieve(black_box("protocol rules modbus_tcp function_code 16"), 5))));
}

fn metrics(c: &mut Criterion) {
    let spec = modbus();
    let seeds: Vec<_> = frames(&spec, 8).iter().map(|b| seed(&spec, b)).collect();
    let strategy = MutationStrategy::for_spec(&spec, 0.1, 0.5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ledger = Ledger::new();
    ledger.push(LedgerRecord::Campaign {
        name: "bench".into(),
        protocol_id: spec.protocol_id.clone(),
        backend: "deterministic".into(),
        master_seed: 5,
    });
    for s in &seeds {
        ledger.push(LedgerRecord::Seed {
            seed_id: s.seed_id.clone(),
            protocol_id: s.protocol_id.clone(),
            fields: s.fields.clone(),
            provenance: s.provenance.clone(),
        });
    }
    ledger.push(LedgerRecord::Cycle { index: 1, at_ms: 0 });
    let mut n = 0;
    for s in &seeds {
        for (mutations, bytes) in generate_batch(s, &spec, &strategy, &EngineConfig::default(), 1_000, &mut rng) {
            n += 1;
            ledger.push(LedgerRecord::Case {
                case_id: format!("b-{n}"),
                seed_id: s.seed_id.clone(),
                agent: "bench".into(),
                bytes,
                mutations,
                fallback: false,
            });
        }
    }
    c.bench_function("report_8000_cases", |b| b.iter(|| black_box(compute_report(&ledger, Some(&spec)).unwrap())));
}

criterion_group!(benches, mutation, retrieval, metrics);
criterion_main!(benches);
