//! Shared setup for the benchmarks in `benches/`.

use std::path::PathBuf;

use icsfuzz_core::protocol::{decode_frame, encode_frame, load_spec, validate_frame, ProtocolSpec, Synthesizer};
use icsfuzz_core::seed::{seed_id, Seed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

pub fn modbus() -> ProtocolSpec {
    load_spec(fixture("modbus_tcp.spec")).expect("bundled spec parses")
}

/// `n` valid request frames drawn by the synthesizer.
pub fn frames(spec: &ProtocolSpec, n: usize) -> Vec<Vec<u8>> {
    let synth = Synthesizer::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n).filter_map(|_| synth.frame(&mut rng)).map(|f| encode_frame(&f, spec).unwrap()).collect()
}

pub fn seed(spec: &ProtocolSpec, bytes: &[u8]) -> Seed {
    let f = decode_frame(bytes, spec).unwrap();
    Seed {
        seed_id: seed_id(&spec.protocol_id, &f.values),
        protocol_id: spec.protocol_id.clone(),
        validation: validate_frame(&f, spec),
        fields: f.values,
        provenance: "bench".into(),
        rules: Vec::new(),
    }
}
