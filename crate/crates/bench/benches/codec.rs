use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use icsfuzz_bench::{frames, modbus};
use icsfuzz_core::protocol::{decode_frame, encode_frame, validate_frame};

fn codec(c: &mut Criterion) {
    let spec = modbus();
    let wire = frames(&spec, 256);
    let decoded: Vec<_> = wire.iter().map(|b| decode_frame(b, &spec).unwrap()).collect();

    let mut g = c.benchmark_group("codec");
    g.throughput(Throughput::Elements(wire.len() as u64));
    g.bench_function("decode", |b| {
        b.iter(|| {
            for w in &wire {
                black_box(decode_frame(black_box(w), &spec).unwrap());
            }
        })
    });
    g.bench_function("encode", |b| {
        b.iter(|| {
            for f in &decoded {
                black_box(encode_frame(black_box(f), &spec).unwrap());
            }
        })
    });
    g.bench_function("validate", |b| {
        b.iter_batched(
            || decoded.clone(),
            |fs| {
                for f in &fs {
                    black_box(validate_frame(f, &spec));
                }
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
