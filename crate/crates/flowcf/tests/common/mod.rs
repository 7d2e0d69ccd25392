//! Shared helpers for integration tests: a synthetic ratings corpus with
//! planted block structure that a working model must pick up.

use std::fmt::Write;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Parameters for the synthetic corpus. Users split into two halves, items
/// into two halves; each user mostly likes items from their own half.
pub struct CorpusSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// High-rating (4 or 5) interactions per user.
    pub liked_per_user: usize,
    /// Low-rating (1..=3) interactions per user; dropped by thresholding.
    pub disliked_per_user: usize,
    /// Probability that a liked item comes from the other half.
    pub crossover: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_users: 80,
            n_items: 60,
            liked_per_user: 12,
            disliked_per_user: 2,
            crossover: 0.1,
            seed: 17,
        }
    }
}

/// Renders the corpus in `user::item::rating::timestamp` lines. Tokens are
/// zero-padded so lexicographic and numeric orders agree.
pub fn block_corpus(spec: &CorpusSpec) -> String {
    assert!(spec.n_items >= 2 && spec.n_users >= 2);
    assert!(spec.liked_per_user + spec.disliked_per_user <= spec.n_items);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half_users = spec.n_users / 2;
    let half_items = spec.n_items / 2;
    let mut text = String::new();
    let mut ts = 978_300_000i64;
    for u in 0..spec.n_users {
        let own_block: Vec<usize> = if u < half_users {
            (0..half_items).collect()
        } else {
            (half_items..spec.n_items).collect()
        };
        let other_block: Vec<usize> = (0..spec.n_items)
            .filter(|i| !own_block.contains(i))
            .collect();
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < spec.liked_per_user {
            let pool = if rng.random_bool(spec.crossover) {
                &other_block
            } else {
                &own_block
            };
            let item = pool[rng.random_range(0..pool.len())];
            if !chosen.contains(&item) {
                chosen.push(item);
            }
        }
        for &item in &chosen {
            let rating = if rng.random_bool(0.5) { 5 } else { 4 };
            ts += 1;
            writeln!(text, "u{u:03}::i{item:03}::{rating}::{ts}").unwrap();
        }
        let mut disliked = 0;
        while disliked < spec.disliked_per_user {
            let item = rng.random_range(0..spec.n_items);
            if !chosen.contains(&item) {
                chosen.push(item);
                let rating = rng.random_range(1..=3);
                ts += 1;
                writeln!(text, "u{u:03}::i{item:03}::{rating}::{ts}").unwrap();
                disliked += 1;
            }
        }
    }
    text
}

/// A small TOML run configuration sized for tests: tiny model, few epochs.
pub fn tiny_config_toml(seed: u64) -> String {
    format!(
        r#"seed = {seed}

[data]
threshold = 4.0
k_core = 3
ratios = [0.8, 0.1, 0.1]

[flow]
n_steps = 4

[model]
hidden_sizes = [16]
step_embed_dim = 4
dropout = 0.0

[train]
batch_size = 256
learning_rate = 0.01
max_epochs = 12
patience = 5
eval_every = 4

[eval]
ks = [5, 10]
"#
    )
}
