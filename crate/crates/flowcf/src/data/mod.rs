//! Dataset ingestion: rating-log parsing, binarization with a rating
//! threshold, iterative k-core filtering, seeded per-user splits, item
//! frequencies, and noise injection for robustness experiments.

mod bundle;

pub use bundle::{read_bundle, write_bundle, Bundle, Provenance};

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::BufRead;
use std::sync::Arc;

use ndarray::{Array2, NdFloat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RatingRecord {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// A positive (user, item) interaction by token.
pub type Pair = (String, String);

/// Parses delimited rating lines: user, item, rating, optional timestamp.
/// Extra fields beyond the fourth are ignored.
pub fn parse_ratings(
    reader: impl BufRead,
    delimiter: &str,
    skip_header: bool,
) -> Result<Vec<RatingRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if skip_header && idx == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(delimiter).collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected at least 3 fields, got {}", fields.len()),
            });
        }
        let user_id = fields[0].trim();
        let item_id = fields[1].trim();
        if user_id.is_empty() || item_id.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty user or item token".into(),
            });
        }
        let rating: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("unparseable rating {:?}", fields[2]),
        })?;
        if !rating.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("non-finite rating {rating}"),
            });
        }
        let timestamp = match fields.get(3) {
            Some(ts) => Some(ts.trim().parse::<i64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("unparseable timestamp {ts:?}"),
            })?),
            None => None,
        };
        records.push(RatingRecord {
            user_id: user_id.to_string(),
            item_id: item_id.to_string(),
            rating,
            timestamp,
        });
    }
    Ok(records)
}

/// Splits deduplicated (user, item) pairs by whether their maximum observed
/// rating clears the threshold. Both lists come out sorted by token.
pub fn partition_by_threshold(
    records: &[RatingRecord],
    threshold: f64,
) -> (Vec<Pair>, Vec<Pair>) {
    let mut max_rating: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for r in records {
        let e = max_rating
            .entry((&r.user_id, &r.item_id))
            .or_insert(f64::NEG_INFINITY);
        if r.rating > *e {
            *e = r.rating;
        }
    }
    let mut kept = Vec::new();
    let mut discarded = Vec::new();
    for ((u, i), rating) in max_rating {
        let pair = (u.to_string(), i.to_string());
        if rating >= threshold {
            kept.push(pair);
        } else {
            discarded.push(pair);
        }
    }
    (kept, discarded)
}

/// Pairs whose maximum rating reaches the threshold, deduplicated.
pub fn binarize(records: &[RatingRecord], threshold: f64) -> Vec<Pair> {
    partition_by_threshold(records, threshold).0
}

/// Removes users and items with fewer than k interactions, cascading until
/// a fixed point. The k-core is unique, so any processing order lands on the
/// same result; surviving pairs keep their input order.
pub fn kcore_filter(pairs: &[Pair], k: usize) -> Vec<Pair> {
    assert!(k >= 1, "k-core needs k >= 1");
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut user_pairs: Vec<Vec<usize>> = Vec::new();
    let mut item_pairs: Vec<Vec<usize>> = Vec::new();
    let mut pair_user = Vec::with_capacity(pairs.len());
    let mut pair_item = Vec::with_capacity(pairs.len());
    for (idx, (u, i)) in pairs.iter().enumerate() {
        let uid = *user_ids.entry(u.as_str()).or_insert_with(|| {
            user_pairs.push(Vec::new());
            user_pairs.len() - 1
        });
        let iid = *item_ids.entry(i.as_str()).or_insert_with(|| {
            item_pairs.push(Vec::new());
            item_pairs.len() - 1
        });
        user_pairs[uid].push(idx);
        item_pairs[iid].push(idx);
        pair_user.push(uid);
        pair_item.push(iid);
    }
    let mut user_deg: Vec<usize> = user_pairs.iter().map(Vec::len).collect();
    let mut item_deg: Vec<usize> = item_pairs.iter().map(Vec::len).collect();
    let mut dead_user = vec![false; user_deg.len()];
    let mut dead_item = vec![false; item_deg.len()];
    let mut alive = vec![true; pairs.len()];
    let mut queue: VecDeque<(bool, usize)> = VecDeque::new();
    for (uid, &deg) in user_deg.iter().enumerate() {
        if deg < k {
            dead_user[uid] = true;
            queue.push_back((true, uid));
        }
    }
    for (iid, &deg) in item_deg.iter().enumerate() {
        if deg < k {
            dead_item[iid] = true;
            queue.push_back((false, iid));
        }
    }
    while let Some((is_user, id)) = queue.pop_front() {
        let plist = if is_user {
            &user_pairs[id]
        } else {
            &item_pairs[id]
        };
        for &pidx in plist {
            if !alive[pidx] {
                continue;
            }
            alive[pidx] = false;
            if is_user {
                let iid = pair_item[pidx];
                if !dead_item[iid] {
                    item_deg[iid] -= 1;
                    if item_deg[iid] < k {
                        dead_item[iid] = true;
                        queue.push_back((false, iid));
                    }
                }
            } else {
                let uid = pair_user[pidx];
                if !dead_user[uid] {
                    user_deg[uid] -= 1;
                    if user_deg[uid] < k {
                        dead_user[uid] = true;
                        queue.push_back((true, uid));
                    }
                }
            }
        }
    }
    pairs
        .iter()
        .zip(&alive)
        .filter(|&(_, &a)| a)
        .map(|(p, _)| p.clone())
        .collect()
}

/// Bijective map between opaque tokens and dense indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenIndex {
    tokens: Vec<String>,
    map: HashMap<String, u32>,
}

impl TokenIndex {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut map = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if map.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?} in index")));
            }
        }
        Ok(TokenIndex { tokens, map })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<u32> {
        self.map.get(token).copied()
    }

    pub fn token(&self, index: u32) -> &str {
        &self.tokens[index as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Sparse binary user×item matrix; each row holds the user's item indices
/// in strictly increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    pub n_users: usize,
    pub n_items: usize,
    rows: Vec<Vec<u32>>,
    pub user_index: Arc<TokenIndex>,
    pub item_index: Arc<TokenIndex>,
}

impl InteractionMatrix {
    pub fn from_rows(
        rows: Vec<Vec<u32>>,
        user_index: Arc<TokenIndex>,
        item_index: Arc<TokenIndex>,
    ) -> Result<Self> {
        let n_users = user_index.len();
        let n_items = item_index.len();
        if rows.len() != n_users {
            return Err(Error::Shape(format!(
                "{} rows for {} users",
                rows.len(),
                n_users
            )));
        }
        for (u, row) in rows.iter().enumerate() {
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Data(format!(
                        "row {u} items not strictly increasing"
                    )));
                }
            }
            if let Some(&last) = row.last() {
                if last as usize >= n_items {
                    return Err(Error::Data(format!(
                        "row {u} references item {last} beyond {n_items}"
                    )));
                }
            }
        }
        Ok(InteractionMatrix {
            n_users,
            n_items,
            rows,
            user_index,
            item_index,
        })
    }

    pub fn row(&self, user: usize) -> &[u32] {
        &self.rows[user]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, user: usize, item: u32) -> bool {
        self.rows[user].binary_search(&item).is_ok()
    }

    /// Densifies the selected user rows into a batch × n_items matrix.
    pub fn to_dense_rows<F: NdFloat>(&self, users: &[usize]) -> Array2<F> {
        let mut out = Array2::zeros((users.len(), self.n_items));
        for (r, &u) in users.iter().enumerate() {
            for &i in &self.rows[u] {
                out[[r, i as usize]] = F::one();
            }
        }
        out
    }

    /// Elementwise OR with another matrix over the same index maps.
    pub fn union(&self, other: &InteractionMatrix) -> Result<InteractionMatrix> {
        if self.n_users != other.n_users || self.n_items != other.n_items {
            return Err(Error::Shape("matrix union dimension mismatch".into()));
        }
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| {
                let mut merged: Vec<u32> = a.iter().chain(b.iter()).copied().collect();
                merged.sort_unstable();
                merged.dedup();
                merged
            })
            .collect();
        InteractionMatrix::from_rows(rows, self.user_index.clone(), self.item_index.clone())
    }

    /// Inserts an interaction keeping the row ordered; false if present.
    pub(crate) fn insert(&mut self, user: usize, item: u32) -> bool {
        match self.rows[user].binary_search(&item) {
            Ok(_) => false,
            Err(pos) => {
                self.rows[user].insert(pos, item);
                true
            }
        }
    }
}

/// Per-item global interaction frequency, each entry in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVector {
    values: Vec<f64>,
}

impl FrequencyVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let fv = FrequencyVector { values };
        fv.validate()?;
        Ok(fv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(
                "frequency vector entry outside [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Train/validation/test matrices over shared index maps; per user the three
/// item sets are disjoint (until noise injection deliberately overlays the
/// train and validation rows with the same false positives).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: InteractionMatrix,
    pub validation: InteractionMatrix,
    pub test: InteractionMatrix,
    pub seed: u64,
}

/// Held-out counts for a user with n items: one guaranteed validation and
/// test item once the user has at least 3, rounded ratio shares beyond that.
fn holdout_counts(n: usize, r_val: f64, r_test: f64) -> (usize, usize) {
    if n < 3 {
        return (0, 0);
    }
    let val = ((r_val * n as f64).round() as usize).max(1);
    let test = ((r_test * n as f64).round() as usize).max(1);
    (val, test)
}

/// Seeded per-user holdout split. Each user's items are shuffled once and
/// partitioned contiguously into train, validation, test.
pub fn split(pairs: &[Pair], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split ratios must sum to 1".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Data("no interactions to split".into()));
    }

    let mut users: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
    items.sort_unstable();
    items.dedup();
    let user_index = Arc::new(TokenIndex::new(users)?);
    let item_index = Arc::new(TokenIndex::new(items)?);

    let n_users = user_index.len();
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); n_users];
    for (u, i) in pairs {
        let uid = user_index.index_of(u).unwrap() as usize;
        lists[uid].push(item_index.index_of(i).unwrap());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_rows = vec![Vec::new(); n_users];
    let mut val_rows = vec![Vec::new(); n_users];
    let mut test_rows = vec![Vec::new(); n_users];
    for (u, list) in lists.iter_mut().enumerate() {
        list.sort_unstable();
        list.dedup();
        list.shuffle(&mut rng);
        let n = list.len();
        let (n_val, n_test) = holdout_counts(n, r_val, r_test);
        let n_train = n
            .checked_sub(n_val + n_test)
            .filter(|&t| t >= 1)
            .ok_or_else(|| {
                Error::Data(format!(
                    "user {:?} has no train items left after holdout",
                    user_index.token(u as u32)
                ))
            })?;
        let take = |range: std::ops::Range<usize>| {
            let mut part: Vec<u32> = list[range].to_vec();
            part.sort_unstable();
            part
        };
        train_rows[u] = take(0..n_train);
        val_rows[u] = take(n_train..n_train + n_val);
        test_rows[u] = take(n_train + n_val..n);
    }

    Ok(DatasetSplit {
        train: InteractionMatrix::from_rows(train_rows, user_index.clone(), item_index.clone())?,
        validation: InteractionMatrix::from_rows(
            val_rows,
            user_index.clone(),
            item_index.clone(),
        )?,
        test: InteractionMatrix::from_rows(test_rows, user_index, item_index)?,
        seed,
    })
}

/// f_i = (train interaction count of item i) / n_users.
pub fn item_frequencies(train: &InteractionMatrix) -> FrequencyVector {
    assert!(train.n_users > 0, "frequencies need at least one user");
    let mut counts = vec![0usize; train.n_items];
    for row in train.rows() {
        for &i in row {
            counts[i as usize] += 1;
        }
    }
    let n = train.n_users as f64;
    FrequencyVector::new(counts.into_iter().map(|c| c as f64 / n).collect())
        .expect("counts never exceed the user count")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Natural,
    Random,
}

/// Adds false-positive interactions to the train and validation matrices,
/// leaving the test matrix untouched. Natural mode samples from the
/// sub-threshold pairs discarded at binarization (as index pairs); random
/// mode samples uniformly from never-interacted cells.
pub fn inject_noise(
    split: &DatasetSplit,
    mode: NoiseMode,
    proportion: f64,
    discarded: &[(u32, u32)],
    seed: u64,
) -> Result<DatasetSplit> {
    if !(0.0..=0.5).contains(&proportion) {
        return Err(Error::Config(format!(
            "noise proportion must lie in [0, 0.5], got {proportion}"
        )));
    }
    let mut out = split.clone();
    let count = (proportion * split.train.nnz() as f64).round() as usize;
    if count == 0 {
        return Ok(out);
    }
    let n_users = split.train.n_users;
    let n_items = split.train.n_items;
    let present = |u: usize, i: u32| {
        split.train.contains(u, i) || split.validation.contains(u, i) || split.test.contains(u, i)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<(u32, u32)> = match mode {
        NoiseMode::Natural => {
            let candidates: Vec<(u32, u32)> = discarded
                .iter()
                .copied()
                .filter(|&(u, i)| {
                    (u as usize) < n_users && (i as usize) < n_items && !present(u as usize, i)
                })
                .collect();
            if count > candidates.len() {
                return Err(Error::Data(format!(
                    "requested {count} noise pairs but only {} sub-threshold candidates exist",
                    candidates.len()
                )));
            }
            rand::seq::index::sample(&mut rng, candidates.len(), count)
                .iter()
                .map(|k| candidates[k])
                .collect()
        }
        NoiseMode::Random => {
            let total = n_users * n_items;
            let occupied =
                split.train.nnz() + split.validation.nnz() + split.test.nnz();
            if count > total - occupied {
                return Err(Error::Data(format!(
                    "requested {count} noise pairs but only {} free cells exist",
                    total - occupied
                )));
            }
            let mut chosen = Vec::with_capacity(count);
            let mut chosen_set: HashSet<(u32, u32)> = HashSet::with_capacity(count);
            while chosen.len() < count {
                let u = rng.random_range(0..n_users) as u32;
                let i = rng.random_range(0..n_items) as u32;
                if present(u as usize, i) || !chosen_set.insert((u, i)) {
                    continue;
                }
                chosen.push((u, i));
            }
            chosen
        }
    };
    for &(u, i) in &chosen {
        let in_train = out.train.insert(u as usize, i);
        let in_val = out.validation.insert(u as usize, i);
        debug_assert!(in_train && in_val);
    }
    Ok(out)
}
