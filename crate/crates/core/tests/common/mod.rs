//! Reference models used as test oracles. Nothing here calls into the
//! library's memory, retrieval, or parsing code.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;

/// Plain ordered-map model of the memory store.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct MapOracle {
    pub entries: BTreeMap<u64, String>,
    pub scratchpad: String,
    pub next_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Create(String),
    Read(String),
    Update(u64, String),
    Delete(u64),
    Scratchpad(String),
}

impl MapOracle {
    /// Returns whether the op succeeded.
    pub fn apply(&mut self, op: &Op) -> bool {
        match op {
            Op::Create(c) if c.trim().is_empty() => false,
            Op::Create(c) => {
                self.entries.insert(self.next_id, c.clone());
                self.next_id += 1;
                true
            }
            Op::Read(_) => true,
            Op::Update(_, c) if c.trim().is_empty() => false,
            Op::Update(id, c) => match self.entries.get_mut(id) {
                Some(slot) => {
                    *slot = c.clone();
                    true
                }
                None => false,
            },
            Op::Delete(id) => self.entries.remove(id).is_some(),
            Op::Scratchpad(c) => {
                self.scratchpad = c.clone();
                true
            }
        }
    }
}

const VOCAB: &[&str] = &[
    "apple", "river", "stone", "falcon", "violet", "copper", "maple", "orbit", "lantern", "harbor",
    "quartz", "ember", "meadow", "cipher", "tundra", "saffron", "glacier", "nectar", "pylon",
    "zephyr", "basalt", "ivory", "juniper", "kelp", "lotus", "mosaic", "nimbus", "opal",
];

pub fn phrase<R: Rng + ?Sized>(rng: &mut R, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    (0..n)
        .map(|_| *VOCAB.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A random op over the current oracle state. Ids are usually live, but
/// sometimes stale or never issued; contents are sometimes blank.
pub fn random_op(rng: &mut impl Rng, oracle: &MapOracle) -> Op {
    let content = |rng: &mut dyn rand::RngCore| {
        if rng.random_bool(0.05) {
            "  ".to_string()
        } else {
            phrase(rng, 5)
        }
    };
    let id = |rng: &mut dyn rand::RngCore| {
        let live: Vec<u64> = oracle.entries.keys().copied().collect();
        if !live.is_empty() && rng.random_bool(0.8) {
            *live.choose(rng).unwrap()
        } else {
            rng.random_range(0..oracle.next_id + 3)
        }
    };
    match rng.random_range(0..10) {
        0..=3 => Op::Create(content(rng)),
        4 => Op::Read(phrase(rng, 3)),
        5 | 6 => Op::Update(id(rng), content(rng)),
        7 | 8 => Op::Delete(id(rng)),
        _ => Op::Scratchpad(if rng.random_bool(0.2) {
            String::new()
        } else {
            phrase(rng, 4)
        }),
    }
}

/// Table-schema text for one op, written out by hand.
pub fn table_text(op: &Op) -> String {
    match op {
        Op::Create(c) => format!("<create_memory>{c}</create_memory>"),
        Op::Read(q) => format!("<read_memory>{q}</read_memory>"),
        Op::Update(id, c) => format!("<update_memory>{id}: {c}</update_memory>"),
        Op::Delete(id) => format!("<delete_memory>{id}</delete_memory>"),
        Op::Scratchpad(c) => format!("<scratchpad>{c}</scratchpad>"),
    }
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h = 14695981039346656037u64;
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(1099511628211);
    }
    h
}

/// Bucket counts for the deterministic hash embedding: lowercase words,
/// character trigrams of each (whole word when three chars or fewer).
pub fn hash_counts(text: &str, dim: usize) -> Vec<u64> {
    let lower = text.to_lowercase();
    let mut counts = vec![0u64; dim];
    let mut any = false;
    for word in lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        any = true;
        let chars: Vec<char> = word.chars().collect();
        if chars.len() <= 3 {
            counts[(fnv(word.as_bytes()) % dim as u64) as usize] += 1;
        } else {
            for i in 0..=chars.len() - 3 {
                let g: String = chars[i..i + 3].iter().collect();
                counts[(fnv(g.as_bytes()) % dim as u64) as usize] += 1;
            }
        }
    }
    if !any {
        let t = lower.trim();
        if !t.is_empty() {
            counts[(fnv(t.as_bytes()) % dim as u64) as usize] += 1;
        }
    }
    counts
}

fn dot(a: &[u64], b: &[u64]) -> u128 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as u128) * (*y as u128))
        .sum()
}

/// Exact brute-force cosine ranking. Orders are decided in integer
/// arithmetic: for a fixed query, cos(a) > cos(b) iff
/// dot(a)^2 * |b|^2 > dot(b)^2 * |a|^2 (all dot products are non-negative).
/// Returns (id, cosine) for the best `k`.
pub fn exact_top_k(
    memories: &[(u64, String)],
    query: &str,
    k: usize,
    dim: usize,
) -> Vec<(u64, f64)> {
    let q = hash_counts(query, dim);
    let qn = dot(&q, &q);
    let mut scored: Vec<(u64, u128, u128)> = memories
        .iter()
        .map(|(id, text)| {
            let v = hash_counts(text, dim);
            (*id, dot(&v, &q), dot(&v, &v))
        })
        .collect();
    scored.sort_by(|a, b| {
        let lhs = a.1 * a.1 * b.2;
        let rhs = b.1 * b.1 * a.2;
        rhs.cmp(&lhs).then(a.0.cmp(&b.0))
    });
    scored
        .into_iter()
        .take(k)
        .map(|(id, d, n)| (id, d as f64 / ((n as f64) * (qn as f64)).sqrt()))
        .collect()
}

/// Retrieval for several queries: ranked lists concatenated in query
/// order, repeated ids dropped, cut to `k`.
pub fn exact_merged(
    memories: &[(u64, String)],
    queries: &[String],
    k: usize,
    dim: usize,
) -> Vec<u64> {
    let mut out = Vec::new();
    for q in queries {
        for (id, _) in exact_top_k(memories, q, k, dim) {
            if out.len() < k && !out.contains(&id) {
                out.push(id);
            }
        }
    }
    out
}

/// Arithmetic mean subtracted from each reward, accumulated in a fixed order.
pub fn centered(rewards: &[f64]) -> Vec<f64> {
    let mut total = 0.0;
    for r in rewards {
        total += r;
    }
    let mean = total / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}
