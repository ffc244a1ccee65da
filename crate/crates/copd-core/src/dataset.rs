//! Dual-domain interaction data: filtering, reindexing, leave-one-out
//! splitting, popularity weights, and the training/evaluation samplers.
//!
//! Both domains share one user set; items never overlap across domains.
//! Ratings are converted to implicit positives, duplicate `(user, item)`
//! pairs collapse to one interaction keeping the latest timestamp.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::SplitMix64;

/// One raw interaction line. `timestamp` is seconds, `-1` when absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// Domain selector used across sampling and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn tag(self) -> u64 {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Domain::A => "a",
            Domain::B => "b",
        }
    }
}

/// Joint training sample: one user with a positive and a negative per domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriple {
    pub user: usize,
    pub pos_a: usize,
    pub neg_a: usize,
    pub pos_b: usize,
    pub neg_b: usize,
}

/// Counters reported by [`leave_one_out_split`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitStats {
    pub held_out_a: usize,
    pub held_out_b: usize,
    /// Users whose held-out pick would have orphaned the item; they keep the
    /// interaction in train and get no test entry.
    pub cold_skipped_a: usize,
    pub cold_skipped_b: usize,
}

/// Filtered, reindexed interactions for two domains over one shared user set.
#[derive(Debug, Clone)]
pub struct DualDomainDataset {
    pub n_users: usize,
    pub n_items_a: usize,
    pub n_items_b: usize,
    pub train_a: Vec<(usize, usize)>,
    pub train_b: Vec<(usize, usize)>,
    /// Timestamps aligned with the train vectors; `-1` when unknown. Consumed
    /// by the split; datasets loaded from prepared files carry `-1`s.
    pub timestamps_a: Vec<i64>,
    pub timestamps_b: Vec<i64>,
    /// Held-out test item per user, absent for degenerate/cold-start users.
    pub test_a: Vec<Option<usize>>,
    pub test_b: Vec<Option<usize>>,
    /// Min-max normalized train interaction counts, one entry per item.
    pub pop_a: Vec<f64>,
    pub pop_b: Vec<f64>,
    /// Internal index -> external id.
    pub user_ids: Vec<String>,
    pub item_ids_a: Vec<String>,
    pub item_ids_b: Vec<String>,
    // Sorted per-user train item lists, rebuilt whenever train changes.
    neighborhoods_a: Vec<Vec<usize>>,
    neighborhoods_b: Vec<Vec<usize>>,
}

impl DualDomainDataset {
    /// Sorted train items of one user in one domain.
    pub fn train_items(&self, domain: Domain, user: usize) -> &[usize] {
        match domain {
            Domain::A => &self.neighborhoods_a[user],
            Domain::B => &self.neighborhoods_b[user],
        }
    }

    pub fn train(&self, domain: Domain) -> &[(usize, usize)] {
        match domain {
            Domain::A => &self.train_a,
            Domain::B => &self.train_b,
        }
    }

    pub fn test(&self, domain: Domain) -> &[Option<usize>] {
        match domain {
            Domain::A => &self.test_a,
            Domain::B => &self.test_b,
        }
    }

    pub fn n_items(&self, domain: Domain) -> usize {
        match domain {
            Domain::A => self.n_items_a,
            Domain::B => self.n_items_b,
        }
    }

    pub fn popularity(&self, domain: Domain) -> &[f64] {
        match domain {
            Domain::A => &self.pop_a,
            Domain::B => &self.pop_b,
        }
    }

    /// True when the user interacted with the item in train or test.
    pub fn interacted(&self, domain: Domain, user: usize, item: usize) -> bool {
        self.train_items(domain, user).binary_search(&item).is_ok()
            || self.test(domain)[user] == Some(item)
    }

    /// Fraction of observed cells in the user-item matrix.
    pub fn density(&self, domain: Domain) -> f64 {
        density(self.train(domain).len() + self.test(domain).iter().flatten().count(),
                self.n_users,
                self.n_items(domain))
    }

    pub fn rebuild_neighborhoods(&mut self) {
        self.neighborhoods_a = neighborhoods(&self.train_a, self.n_users);
        self.neighborhoods_b = neighborhoods(&self.train_b, self.n_users);
    }

    /// Reassemble a dataset from prepared parts, revalidating bounds and the
    /// test-items-appear-in-train rule.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        train_a: Vec<(usize, usize)>,
        train_b: Vec<(usize, usize)>,
        test_a: Vec<Option<usize>>,
        test_b: Vec<Option<usize>>,
        pop_a: Vec<f64>,
        pop_b: Vec<f64>,
        user_ids: Vec<String>,
        item_ids_a: Vec<String>,
        item_ids_b: Vec<String>,
    ) -> Result<Self> {
        let n_users = user_ids.len();
        let n_items_a = item_ids_a.len();
        let n_items_b = item_ids_b.len();
        let check = |train: &[(usize, usize)], test: &[Option<usize>], n_items: usize| -> Result<()> {
            if test.len() != n_users {
                return Err(CoreError::InvalidArgument(
                    "test vector length != user count".to_string(),
                ));
            }
            let mut item_in_train = vec![false; n_items];
            for &(u, i) in train {
                if u >= n_users || i >= n_items {
                    return Err(CoreError::InvalidArgument(
                        "train index out of bounds".to_string(),
                    ));
                }
                item_in_train[i] = true;
            }
            for t in test.iter().flatten() {
                if *t >= n_items || !item_in_train[*t] {
                    return Err(CoreError::InvalidArgument(
                        "test item missing from train split".to_string(),
                    ));
                }
            }
            Ok(())
        };
        check(&train_a, &test_a, n_items_a)?;
        check(&train_b, &test_b, n_items_b)?;
        let ts_a = vec![-1; train_a.len()];
        let ts_b = vec![-1; train_b.len()];
        let mut ds = DualDomainDataset {
            n_users,
            n_items_a,
            n_items_b,
            train_a,
            train_b,
            timestamps_a: ts_a,
            timestamps_b: ts_b,
            test_a,
            test_b,
            pop_a,
            pop_b,
            user_ids,
            item_ids_a,
            item_ids_b,
            neighborhoods_a: Vec::new(),
            neighborhoods_b: Vec::new(),
        };
        ds.rebuild_neighborhoods();
        Ok(ds)
    }
}

pub fn density(interactions: usize, n_users: usize, n_items: usize) -> f64 {
    if n_users == 0 || n_items == 0 {
        return 0.0;
    }
    interactions as f64 / (n_users as f64 * n_items as f64)
}

fn neighborhoods(train: &[(usize, usize)], n_users: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_users];
    for &(u, i) in train {
        out[u].push(i);
    }
    for items in &mut out {
        items.sort_unstable();
    }
    out
}

// ── Building ─────────────────────────────────────────────────────────

/// Deduplicated pairs of one domain keyed `(user, item) -> latest timestamp`.
type PairMap = BTreeMap<(String, String), i64>;

fn dedup(raw: &[Interaction]) -> PairMap {
    let mut map = PairMap::new();
    for it in raw {
        let key = (it.user.clone(), it.item.clone());
        let entry = map.entry(key).or_insert(i64::MIN);
        if it.timestamp > *entry {
            *entry = it.timestamp;
        }
    }
    map
}

/// Drop users below `min_user` and items below `min_item` distinct
/// interactions, repeating until both constraints hold simultaneously.
fn filter_to_fixed_point(pairs: &mut PairMap, min_user: usize, min_item: usize) {
    loop {
        let mut user_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut item_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (u, i) in pairs.keys() {
            *user_counts.entry(u.as_str()).or_default() += 1;
            *item_counts.entry(i.as_str()).or_default() += 1;
        }
        let bad_users: BTreeSet<String> = user_counts
            .iter()
            .filter(|(_, &c)| c < min_user)
            .map(|(u, _)| u.to_string())
            .collect();
        let bad_items: BTreeSet<String> = item_counts
            .iter()
            .filter(|(_, &c)| c < min_item)
            .map(|(i, _)| i.to_string())
            .collect();
        if bad_users.is_empty() && bad_items.is_empty() {
            return;
        }
        pairs.retain(|(u, i), _| !bad_users.contains(u) && !bad_items.contains(i));
    }
}

/// Filter both domains to their 5/10-style fixed points, keep only users
/// present in both, convert to implicit positives, and assign dense indices
/// (users and items ordered by external id).
pub fn build_dual_domain(
    raw_a: &[Interaction],
    raw_b: &[Interaction],
    min_user_inter: usize,
    min_item_inter: usize,
) -> Result<DualDomainDataset> {
    if raw_a.is_empty() || raw_b.is_empty() {
        return Err(CoreError::EmptyDataset("a raw interaction list is empty".to_string()));
    }
    let mut pairs_a = dedup(raw_a);
    let mut pairs_b = dedup(raw_b);
    filter_to_fixed_point(&mut pairs_a, min_user_inter, min_item_inter);
    filter_to_fixed_point(&mut pairs_b, min_user_inter, min_item_inter);

    let users_a: BTreeSet<&String> = pairs_a.keys().map(|(u, _)| u).collect();
    let users_b: BTreeSet<&String> = pairs_b.keys().map(|(u, _)| u).collect();
    let shared: Vec<String> = users_a.intersection(&users_b).map(|u| (*u).clone()).collect();
    if shared.is_empty() {
        return Err(CoreError::EmptyDataset(
            "no overlapping users after filtering".to_string(),
        ));
    }
    let user_index: BTreeMap<&str, usize> =
        shared.iter().enumerate().map(|(idx, u)| (u.as_str(), idx)).collect();

    let index_domain = |pairs: &PairMap| -> (Vec<String>, Vec<(usize, usize)>, Vec<i64>) {
        let mut items: BTreeSet<&String> = BTreeSet::new();
        for ((u, i), _) in pairs.iter() {
            if user_index.contains_key(u.as_str()) {
                items.insert(i);
            }
        }
        let item_ids: Vec<String> = items.into_iter().cloned().collect();
        let item_index: BTreeMap<&str, usize> =
            item_ids.iter().enumerate().map(|(idx, i)| (i.as_str(), idx)).collect();
        let mut train = Vec::new();
        let mut ts = Vec::new();
        for ((u, i), &t) in pairs.iter() {
            if let Some(&uid) = user_index.get(u.as_str()) {
                train.push((uid, item_index[i.as_str()]));
                ts.push(t);
            }
        }
        (item_ids, train, ts)
    };

    let (item_ids_a, train_a, timestamps_a) = index_domain(&pairs_a);
    let (item_ids_b, train_b, timestamps_b) = index_domain(&pairs_b);

    let n_users = shared.len();
    let mut ds = DualDomainDataset {
        n_users,
        n_items_a: item_ids_a.len(),
        n_items_b: item_ids_b.len(),
        train_a,
        train_b,
        timestamps_a,
        timestamps_b,
        test_a: vec![None; n_users],
        test_b: vec![None; n_users],
        pop_a: Vec::new(),
        pop_b: Vec::new(),
        user_ids: shared,
        item_ids_a,
        item_ids_b,
        neighborhoods_a: Vec::new(),
        neighborhoods_b: Vec::new(),
    };
    ds.rebuild_neighborhoods();
    ds.pop_a = compute_popularity(&ds.train_a, ds.n_items_a);
    ds.pop_b = compute_popularity(&ds.train_b, ds.n_items_b);
    Ok(ds)
}

// ── Leave-one-out split ──────────────────────────────────────────────

/// Hold out one interaction per user per domain: the one with the latest
/// timestamp, ties (including all-missing timestamps) broken by a seeded
/// uniform pick. A pick whose item would disappear from train entirely is
/// skipped: the user keeps the interaction and gets no test entry in that
/// domain. Popularity is recomputed from the post-split train splits.
pub fn leave_one_out_split(ds: &mut DualDomainDataset, seed: u64) -> SplitStats {
    let mut stats = SplitStats::default();
    {
        let (held, cold) = split_domain(
            &mut ds.train_a,
            &mut ds.timestamps_a,
            &mut ds.test_a,
            ds.n_users,
            ds.n_items_a,
            seed,
            Domain::A,
        );
        stats.held_out_a = held;
        stats.cold_skipped_a = cold;
    }
    {
        let (held, cold) = split_domain(
            &mut ds.train_b,
            &mut ds.timestamps_b,
            &mut ds.test_b,
            ds.n_users,
            ds.n_items_b,
            seed,
            Domain::B,
        );
        stats.held_out_b = held;
        stats.cold_skipped_b = cold;
    }
    ds.rebuild_neighborhoods();
    ds.pop_a = compute_popularity(&ds.train_a, ds.n_items_a);
    ds.pop_b = compute_popularity(&ds.train_b, ds.n_items_b);
    stats
}

fn split_domain(
    train: &mut Vec<(usize, usize)>,
    timestamps: &mut Vec<i64>,
    test: &mut [Option<usize>],
    n_users: usize,
    n_items: usize,
    seed: u64,
    domain: Domain,
) -> (usize, usize) {
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); n_users];
    for (row, &(u, _)) in train.iter().enumerate() {
        by_user[u].push(row);
    }
    let mut item_occurrences = vec![0usize; n_items];
    for &(_, i) in train.iter() {
        item_occurrences[i] += 1;
    }

    let mut removed_rows: BTreeSet<usize> = BTreeSet::new();
    let (mut held, mut cold) = (0usize, 0usize);
    for user in 0..n_users {
        let rows = &by_user[user];
        if rows.len() < 2 {
            continue; // degenerate user: no test entry
        }
        let latest = rows.iter().map(|&r| timestamps[r]).max().expect("nonempty");
        let candidates: Vec<usize> =
            rows.iter().copied().filter(|&r| timestamps[r] == latest).collect();
        let pick = if candidates.len() == 1 {
            candidates[0]
        } else {
            let mut rng = SplitMix64::from_parts(&[seed, domain.tag(), user as u64]);
            candidates[rng.below(candidates.len())]
        };
        let item = train[pick].1;
        if item_occurrences[item] <= 1 {
            cold += 1; // would orphan the item; keep it in train
            continue;
        }
        item_occurrences[item] -= 1;
        removed_rows.insert(pick);
        test[user] = Some(item);
        held += 1;
    }

    if !removed_rows.is_empty() {
        let mut kept_train = Vec::with_capacity(train.len() - removed_rows.len());
        let mut kept_ts = Vec::with_capacity(kept_train.capacity());
        for row in 0..train.len() {
            if !removed_rows.contains(&row) {
                kept_train.push(train[row]);
                kept_ts.push(timestamps[row]);
            }
        }
        *train = kept_train;
        *timestamps = kept_ts;
    }
    (held, cold)
}

// ── Popularity ───────────────────────────────────────────────────────

/// Min-max normalized train interaction counts. When every count is equal
/// the whole vector is 0, pushing all weight onto the interest loss.
pub fn compute_popularity(train: &[(usize, usize)], n_items: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_items];
    for &(_, i) in train {
        counts[i] += 1;
    }
    let (Some(&min), Some(&max)) = (counts.iter().min(), counts.iter().max()) else {
        return Vec::new();
    };
    if max == min {
        return vec![0.0; n_items];
    }
    let span = (max - min) as f64;
    counts.iter().map(|&c| (c - min) as f64 / span).collect()
}

// ── Samplers ─────────────────────────────────────────────────────────

const NEGATIVE_REJECTION_BUDGET: usize = 100;

fn sample_negative(
    ds: &DualDomainDataset,
    domain: Domain,
    user: usize,
    rng: &mut SplitMix64,
) -> Result<usize> {
    let n_items = ds.n_items(domain);
    let owned = ds.train_items(domain, user);
    for _ in 0..NEGATIVE_REJECTION_BUDGET {
        let cand = rng.below(n_items);
        if owned.binary_search(&cand).is_err() {
            return Ok(cand);
        }
    }
    Err(CoreError::SamplerExhausted(alloc::format!(
        "no negative for user {user} in domain {} after {NEGATIVE_REJECTION_BUDGET} draws",
        domain.label()
    )))
}

/// Draw `batch_size` users uniformly with replacement; per user, one uniform
/// train positive and one rejected-uniform negative per domain.
pub fn sample_bpr_batch(
    ds: &DualDomainDataset,
    batch_size: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<BprTriple>> {
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let user = rng.below(ds.n_users);
        let items_a = ds.train_items(Domain::A, user);
        let items_b = ds.train_items(Domain::B, user);
        if items_a.is_empty() || items_b.is_empty() {
            return Err(CoreError::EmptyDataset(alloc::format!(
                "user {user} has no train interactions in one domain"
            )));
        }
        let pos_a = items_a[rng.below(items_a.len())];
        let neg_a = sample_negative(ds, Domain::A, user, rng)?;
        let pos_b = items_b[rng.below(items_b.len())];
        let neg_b = sample_negative(ds, Domain::B, user, rng)?;
        batch.push(BprTriple { user, pos_a, neg_a, pos_b, neg_b });
    }
    Ok(batch)
}

/// Deterministic per `(user, domain, seed)`: `n` distinct items the user
/// never interacted with (train or test). When fewer such items exist, all
/// of them are returned in ascending order.
pub fn sample_eval_negatives(
    ds: &DualDomainDataset,
    user: usize,
    domain: Domain,
    n: usize,
    seed: u64,
) -> Vec<usize> {
    let n_items = ds.n_items(domain);
    let interacted = ds.train_items(domain, user).len()
        + usize::from(ds.test(domain)[user].is_some());
    let available = n_items - interacted;
    if available <= n {
        return (0..n_items).filter(|&i| !ds.interacted(domain, user, i)).collect();
    }
    let mut rng = SplitMix64::from_parts(&[seed, 2, domain.tag(), user as u64]);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let cand = rng.below(n_items);
        if ds.interacted(domain, user, cand) || !seen.insert(cand) {
            continue;
        }
        out.push(cand);
    }
    out
}
