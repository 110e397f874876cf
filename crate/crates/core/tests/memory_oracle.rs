mod common;

use common::{random_op, MapOracle, Op};
use crudmem::memory::{ActionOutcome, MemoryState};
use crudmem::protocol::{ActionSequence, MemoryAction};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_action(op: &Op) -> MemoryAction {
    match op.clone() {
        Op::Create(content) => MemoryAction::Create { content },
        Op::Read(query) => MemoryAction::Read { query },
        Op::Update(id, content) => MemoryAction::Update { id, content },
        Op::Delete(id) => MemoryAction::Delete { id },
        Op::Scratchpad(content) => MemoryAction::Scratchpad { content },
    }
}

fn assert_matches(state: &MemoryState, oracle: &MapOracle) {
    let got: Vec<(u64, &str)> = state
        .entries()
        .map(|e| (e.id, e.content.as_str()))
        .collect();
    let want: Vec<(u64, &str)> = oracle
        .entries
        .iter()
        .map(|(k, v)| (*k, v.as_str()))
        .collect();
    assert_eq!(got, want);
    assert_eq!(state.len(), oracle.entries.len());
    assert_eq!(state.scratchpad(), oracle.scratchpad);
    assert_eq!(state.next_id(), oracle.next_id);
}

proptest! {
    #[test]
    fn single_ops_match_map(seed in any::<u64>(), len in 1usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = MemoryState::new();
        let mut oracle = MapOracle::default();
        for _ in 0..len {
            let op = random_op(&mut rng, &oracle);
            let ok = oracle.apply(&op);
            let got = match &op {
                Op::Create(c) => state.create(c).is_ok(),
                Op::Read(_) => true,
                Op::Update(id, c) => state.update(*id, c).is_ok(),
                Op::Delete(id) => state.delete(*id).is_ok(),
                Op::Scratchpad(c) => { state.write_scratchpad(c); true }
            };
            prop_assert_eq!(ok, got);
        }
        assert_matches(&state, &oracle);
    }

    #[test]
    fn batched_sequences_match_map(seed in any::<u64>(), batches in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = MemoryState::new();
        let mut oracle = MapOracle::default();
        for _ in 0..batches {
            let mut ops = Vec::new();
            let mut preview = oracle.clone();
            for _ in 0..8 {
                let op = random_op(&mut rng, &preview);
                preview.apply(&op);
                ops.push(op);
            }
            let expected: Vec<bool> = ops.iter().map(|op| oracle.apply(op)).collect();
            let reads: Vec<String> = ops.iter().filter_map(|op| match op {
                Op::Read(q) => Some(q.clone()),
                _ => None,
            }).collect();
            let seq = ActionSequence::from_actions(ops.iter().map(to_action).collect());
            let report = state.apply_sequence(&seq);
            let got: Vec<bool> = report.outcomes.iter().map(ActionOutcome::is_success).collect();
            prop_assert_eq!(got, expected);
            prop_assert_eq!(report.pending_reads, reads);
        }
        assert_matches(&state, &oracle);
    }
}

#[test]
fn snapshot_round_trip_preserves_counter() {
    let mut s = MemoryState::new();
    for c in ["a", "b", "c"] {
        s.create(c).unwrap();
    }
    s.delete(2).unwrap();
    let json = serde_json::to_string(&s).unwrap();
    let mut back: MemoryState = serde_json::from_str(&json).unwrap();
    assert_eq!(back, s);
    assert_eq!(back.create("d").unwrap(), 3);
}
