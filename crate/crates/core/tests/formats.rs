mod common;

use common::*;
use idfe::corpus::{read_embedding, write_embedding};
use idfe::model::{read_checkpoint, write_checkpoint, Checkpoint, Model, ModelConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn thousand_random_byte_round_trips() {
    assert_eq!(format_round_trip_failures(1000, 7), (0, 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn files_round_trip(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_stack(&mut rng);
        let p = dir.path().join("s.idf1");
        write_embedding(&p, &s).unwrap();
        let back = read_embedding(&p).unwrap();
        prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!((back.layers(), back.frames(), back.dim()), (s.layers(), s.frames(), s.dim()));

        let c = random_checkpoint(&mut rng);
        let p = dir.path().join("c.idfc");
        write_checkpoint(&p, &c).unwrap();
        prop_assert_eq!(read_checkpoint(&p).unwrap().to_bytes(), c.to_bytes());
    }

    #[test]
    fn truncation_fails_or_drops_whole_records(seed in any::<u64>(), cut in 1usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_checkpoint(&mut rng);
        let bytes = c.to_bytes();
        // Records run to end of file, so a cut on a record boundary is a
        // valid checkpoint with fewer records; any other cut is an error.
        if cut < bytes.len() {
            let short = &bytes[..bytes.len() - cut];
            if let Ok(back) = Checkpoint::from_bytes(short) {
                prop_assert!(back.tensors.len() < c.tensors.len());
                prop_assert_eq!(back.to_bytes(), short.to_vec());
            }
        }
    }
}

#[test]
fn trained_shapes_survive_the_checkpoint() {
    for (layers, dim, domains, seed) in [(1, 3, 1, 0), (2, 5, 2, 1), (3, 4, 4, 2)] {
        let mut cfg = ModelConfig::desk(layers, dim, domains);
        cfg.encoder = seed % 2 == 0;
        let m = Model::<f32>::init(cfg, seed).unwrap();
        let ckpt = m.to_checkpoint();
        let back = Model::<f32>::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint().to_bytes(), ckpt.to_bytes());
    }
}
