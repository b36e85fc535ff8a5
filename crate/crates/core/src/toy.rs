//! Small synthetic knowledge graphs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::RawTriple;

/// Raw train / valid / test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSplits {
    pub train: Vec<RawTriple>,
    pub valid: Vec<RawTriple>,
    pub test: Vec<RawTriple>,
}

pub const COMPOSITION_ENTITIES: usize = 20;

/// Twenty entities on a cycle with three relations: `next` (i → i+1),
/// `prev` (i → i−1) and `next2` (i → i+2, the composition of `next` with
/// itself). Every held-out triple is implied by training triples: a held-out
/// `next` fact by its `prev` inverse and vice versa, a held-out `next2` fact
/// by the two `next` steps that compose it.
pub fn composition_kg() -> RawSplits {
    let n = COMPOSITION_ENTITIES;
    let name = |i: usize| format!("n{:02}", i % n);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for i in 0..n {
        let facts = [
            RawTriple::new(name(i), "next", name(i + 1)),
            RawTriple::new(name(i + 1), "prev", name(i)),
            RawTriple::new(name(i), "next2", name(i + 2)),
        ];
        for (k, t) in facts.into_iter().enumerate() {
            // Hold out each relation at different positions so no fact and
            // its inverse are both removed.
            match (i + 7 * k) % 10 {
                3 => test.push(t),
                8 if k != 2 => valid.push(t),
                _ => train.push(t),
            }
        }
    }
    RawSplits { train, valid, test }
}

/// A seeded random graph of distinct triples over `entities` entities and
/// `relations` relations, split 80/10/10. Every entity and relation occurs in
/// the training split.
pub fn random_kg(seed: u64, entities: usize, relations: usize, triples: usize) -> RawSplits {
    assert!(triples <= entities * entities * relations);
    assert!(triples >= entities.max(relations));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut all = Vec::with_capacity(triples);
    // Cover every entity and relation first.
    for i in 0..entities.max(relations) {
        let t = (i % entities, i % relations, rng.gen_range(0..entities));
        if seen.insert(t) {
            all.push(t);
        }
    }
    let covered = all.len();
    while all.len() < triples {
        let t = (
            rng.gen_range(0..entities),
            rng.gen_range(0..relations),
            rng.gen_range(0..entities),
        );
        if seen.insert(t) {
            all.push(t);
        }
    }
    all[covered..].shuffle(&mut rng);
    let raw: Vec<RawTriple> = all
        .into_iter()
        .map(|(h, r, t)| RawTriple::new(format!("e{h}"), format!("r{r}"), format!("e{t}")))
        .collect();
    let n_test = triples / 10;
    let n_train = triples - 2 * n_test;
    RawSplits {
        train: raw[..n_train].to_vec(),
        valid: raw[n_train..n_train + n_test].to_vec(),
        test: raw[n_train + n_test..].to_vec(),
    }
}

/// Tab-separated lines, as read by [`crate::data::parse_triples`].
pub fn to_tsv(triples: &[RawTriple]) -> String {
    triples
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
        .collect()
}
