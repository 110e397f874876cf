mod common;

use common::{exact_top_k, hash_counts, phrase};
use crudmem::memory::MemoryState;
use crudmem::par::Exec;
use crudmem::retrieval::{self, HashEmbedder, DEFAULT_DIMENSION};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn bucket_counts_agree_with_reference() {
    let e = HashEmbedder::default();
    for text in [
        "The quick brown fox",
        "a-b c",
        "...",
        "ÄÖÜ straße",
        "x1 y22 z333 w4444",
    ] {
        let got: Vec<u64> = e.counts(text).into_iter().map(u64::from).collect();
        assert_eq!(got, hash_counts(text, DEFAULT_DIMENSION), "{text}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn top_k_matches_brute_force(seed in any::<u64>(), n in 1usize..60, k in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = MemoryState::new();
        let mut memories = Vec::new();
        for _ in 0..n {
            let text = phrase(&mut rng, 6);
            let id = state.create(&text).unwrap();
            memories.push((id, text));
            if rng.random_bool(0.1) {
                let (id, _) = memories.remove(rng.random_range(0..memories.len()));
                state.delete(id).unwrap();
            }
        }
        let query = phrase(&mut rng, 3);
        let e = HashEmbedder::default();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let got = retrieval::top_k_with(&state, &e, &query, k, exec).unwrap();
            let want = exact_top_k(&memories, &query, k, DEFAULT_DIMENSION);
            prop_assert_eq!(
                got.iter().map(|h| h.id).collect::<Vec<_>>(),
                want.iter().map(|w| w.0).collect::<Vec<_>>()
            );
            for (h, w) in got.iter().zip(&want) {
                prop_assert!((h.similarity - w.1).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn update_refreshes_embedding() {
    let mut state = MemoryState::new();
    let e = HashEmbedder::default();
    let a = state.create("glacier glacier").unwrap();
    let b = state.create("orbit").unwrap();
    assert_eq!(retrieval::top_k(&state, &e, "glacier", 1).unwrap()[0].id, a);
    state.update(b, "glacier").unwrap();
    let hits = retrieval::top_k(&state, &e, "glacier", 2).unwrap();
    assert_eq!(hits[0].id, a.min(b));
    assert!((hits[0].similarity - 1.0).abs() < 1e-12);
    assert!((hits[1].similarity - 1.0).abs() < 1e-12);
}
