use gns::harness::{
    decode_checkpoint, encode_checkpoint, export_drawings, load_checkpoint, parse_drawings, save_checkpoint,
    synthesize_toy_corpus, Model, RunConfig,
};
use gns::mdn::ArchConfig;
use gns::token::TokenNoiseParams;
use gns::type_prior::{PriorConfig, TypePrior};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ndjson_export_then_ingest_is_identity_on_the_toy_corpus() {
    let corpus = synthesize_toy_corpus(12, 4, 21).unwrap();
    let records = corpus.records();
    let text = export_drawings(&records);
    let back = parse_drawings(&text, corpus.size, true).unwrap();
    assert!(back.skipped.is_empty());
    assert_eq!(back.records, records);
    assert_eq!(export_drawings(&back.records), text);
}

#[test]
fn a_loaded_checkpoint_scores_types_exactly_as_saved() {
    let prior = TypePrior::init(&ArchConfig::toy(), PriorConfig::default(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let model = Model { prior, noise: TokenNoiseParams::default() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path, Some(&ArchConfig::toy())).unwrap();
    let ty = &synthesize_toy_corpus(5, 1, 0).unwrap().programs[4];
    // Saved weights are f32-exact, so scoring is unchanged bit for bit.
    assert_eq!(loaded.prior.log_p(ty).unwrap().to_bits(), model.prior.log_p(ty).unwrap().to_bits());
    assert_eq!(encode_checkpoint(&loaded), std::fs::read(&path).unwrap());
}

#[test]
fn run_config_round_trips_through_json() {
    let cfg = RunConfig { seed: 77, ..Default::default() };
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_single_byte_flip_is_rejected(pos in 0usize..4096, bit in 0u8..8) {
        let prior = TypePrior::init(&ArchConfig::toy(), PriorConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = encode_checkpoint(&Model { prior, noise: TokenNoiseParams::default() });
        let mut bad = bytes.clone();
        let i = pos * (bytes.len() - 1) / 4095;
        bad[i] ^= 1 << bit;
        prop_assert!(decode_checkpoint(&bad, None).is_err());
    }
}
