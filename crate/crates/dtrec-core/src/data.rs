//! Interaction data: TSV ingestion with the standard preprocessing protocol
//! (iterative 5-core filter, dense id remapping, leave-one-out splits),
//! deterministic batching, and a synthetic hierarchical-taxonomy generator
//! used by the controlled experiments.
//!
//! Conventions throughout: item id 0 is reserved for padding; real items are
//! dense in `1..=n_items`. Batches are left-padded so the most recent item
//! always sits at the last position — the reasoning loop reads that slot.

use crate::error::{Error, Result};
use crate::numerics::rng::{derive_rng, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

// ─── Core dataset ────────────────────────────────────────────────────────────

/// One user's full chronological item sequence (already remapped to dense ids).
#[derive(Clone, Debug)]
pub struct UserSeq {
    /// Original key from the source file (kept for exports).
    pub key: String,
    pub items: Vec<usize>,
}

/// Ground-truth taxonomy labels for synthetic datasets, indexed by item id.
#[derive(Clone, Debug)]
pub struct TaxonomyLabels {
    /// `leaf_of_item[id]` for id in `1..=n_items`; index 0 unused.
    pub leaf_of_item: Vec<usize>,
    pub category_of_item: Vec<usize>,
    pub n_leaves: usize,
    pub n_categories: usize,
}

#[derive(Clone, Debug)]
pub struct InteractionDataset {
    pub users: Vec<UserSeq>,
    /// Item count excluding the padding id.
    pub n_items: usize,
    /// Dense id → original key; `[0]` is the padding sentinel.
    pub item_keys: Vec<String>,
    /// Synthetic ground truth, when this dataset came from the generator.
    pub labels: Option<TaxonomyLabels>,
    /// Synthetic per-user shift probability, when applicable.
    pub user_pi: Option<Vec<f64>>,
}

/// Which leave-one-out view a batch draws targets from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// Visible prefix = all but the last three items' tail; target is the
    /// last item of the training subsequence (everything except the final two).
    Train,
    /// Prefix = training subsequence; target = second-to-last item.
    Valid,
    /// Prefix = all but the last item; target = the last item.
    Test,
}

/// One prediction task: a visible prefix and the item it should rank first.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub user: usize,
    pub prefix: &'a [usize],
    pub target: usize,
}

impl InteractionDataset {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// The leave-one-out example for a user under the given split. Sequences
    /// have length ≥ 5, so every prefix here has at least two items.
    pub fn example(&self, user: usize, split: Split) -> Example<'_> {
        let items = &self.users[user].items;
        let n = items.len();
        let (cut, target_at) = match split {
            Split::Train => (n - 3, n - 3),
            Split::Valid => (n - 2, n - 2),
            Split::Test => (n - 1, n - 1),
        };
        Example { user, prefix: &items[..cut], target: items[target_at] }
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.users.is_empty() || self.n_items == 0 {
            return Err(Error::contract("dataset is empty after 5-core filtering"));
        }
        Ok(())
    }
}

// ─── TSV ingestion ───────────────────────────────────────────────────────────

/// Load `user \t item \t timestamp` rows, apply the iterative 5-core filter,
/// remap ids densely (lexicographic key order, so re-ingestion is bit-stable),
/// and sort each user chronologically with file order breaking timestamp ties.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_interactions(&text)
}

pub fn parse_interactions(text: &str) -> Result<InteractionDataset> {
    // (user, item, ts, file order)
    let mut rows: Vec<(String, String, i64, usize)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (u, it, ts) = match (parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(it), Some(ts)) if parts.next().is_none() => (u, it, ts),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected `user\\titem\\ttimestamp`, got {line:?}"),
                })
            }
        };
        if u.is_empty() || it.is_empty() {
            return Err(Error::Parse { line: lineno, msg: "empty user or item id".into() });
        }
        let ts: i64 = ts.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("timestamp {ts:?} is not an integer"),
        })?;
        rows.push((u.to_string(), it.to_string(), ts, lineno));
    }

    // Iterative 5-core: drop users with <5 interactions and items with <5
    // occurrences until both conditions hold simultaneously.
    let mut alive = vec![true; rows.len()];
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for (r, row) in rows.iter().enumerate() {
            if alive[r] {
                *user_count.entry(&row.0).or_default() += 1;
                *item_count.entry(&row.1).or_default() += 1;
            }
        }
        let mut changed = false;
        for (r, row) in rows.iter().enumerate() {
            if alive[r] && (user_count[row.0.as_str()] < 5 || item_count[row.1.as_str()] < 5) {
                alive[r] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Dense ids in lexicographic key order.
    let (user_keys, item_keys) = {
        let mut iset: Vec<&str> = Vec::new();
        let mut uset: Vec<&str> = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            if alive[r] {
                uset.push(&row.0);
                iset.push(&row.1);
            }
        }
        uset.sort_unstable();
        uset.dedup();
        iset.sort_unstable();
        iset.dedup();
        (uset, iset)
    };
    let item_id: HashMap<&str, usize> =
        item_keys.iter().enumerate().map(|(i, &k)| (k, i + 1)).collect();
    let user_id: HashMap<&str, usize> =
        user_keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();

    let mut users: Vec<UserSeq> = user_keys
        .iter()
        .map(|&k| UserSeq { key: k.to_string(), items: Vec::new() })
        .collect();
    // Chronological order; stable sort keeps file order on timestamp ties.
    let mut surviving: Vec<&(String, String, i64, usize)> =
        rows.iter().enumerate().filter(|(r, _)| alive[*r]).map(|(_, row)| row).collect();
    surviving.sort_by_key(|row| (row.0.clone(), row.2, row.3));
    for row in surviving {
        users[user_id[row.0.as_str()]].items.push(item_id[row.1.as_str()]);
    }

    let ds = InteractionDataset {
        users,
        n_items: item_keys.len(),
        item_keys: std::iter::once("<pad>".to_string())
            .chain(item_keys.iter().map(|k| k.to_string()))
            .collect(),
        labels: None,
        user_pi: None,
    };
    ds.check_nonempty()?;
    Ok(ds)
}

/// Attach a `item_key \t leaf \t category` sidecar to a loaded dataset,
/// re-associating by key so 5-core id remapping cannot skew labels.
pub fn load_labels(path: impl AsRef<Path>, ds: &InteractionDataset) -> Result<TaxonomyLabels> {
    let text = std::fs::read_to_string(path)?;
    let mut by_key: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(k), Some(l), Some(c)) => {
                let l: usize = l.trim().parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("leaf id {l:?} is not an integer"),
                })?;
                let c: usize = c.trim().parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("category id {c:?} is not an integer"),
                })?;
                by_key.insert(k, (l, c));
            }
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "expected `item\\tleaf\\tcategory`".into(),
                })
            }
        }
    }
    let mut leaf_of_item = vec![0usize; ds.n_items + 1];
    let mut category_of_item = vec![0usize; ds.n_items + 1];
    for id in 1..=ds.n_items {
        let key = ds.item_keys[id].as_str();
        let (l, c) = *by_key.get(key).ok_or_else(|| {
            Error::contract(format!("label sidecar is missing item {key}"))
        })?;
        leaf_of_item[id] = l;
        category_of_item[id] = c;
    }
    let n_leaves = leaf_of_item[1..].iter().copied().max().unwrap_or(0) + 1;
    let n_categories = category_of_item[1..].iter().copied().max().unwrap_or(0) + 1;
    Ok(TaxonomyLabels { leaf_of_item, category_of_item, n_leaves, n_categories })
}

// ─── Batching ────────────────────────────────────────────────────────────────

/// Left-padded id matrix plus targets for one step of training or evaluation.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Row-major `len(users) × width` item ids, 0 = padding on the left.
    pub items: Vec<usize>,
    pub width: usize,
    /// True (post-truncation) lengths per row.
    pub lengths: Vec<usize>,
    /// Target item per row; never 0.
    pub targets: Vec<usize>,
    /// Dataset user indices, for per-user exports.
    pub users: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.users.len()
    }
}

/// Cut a split into batches. Training shuffles user order with the
/// `(seed, epoch)`-derived stream; evaluation passes `None` and keeps dataset
/// order. Prefixes are truncated to the most recent `max_len` items, and each
/// batch is padded to its own widest row (never beyond `max_len`).
pub fn make_batches(
    ds: &InteractionDataset,
    split: Split,
    batch_size: usize,
    max_len: usize,
    shuffle: Option<(u64, u64)>,
) -> Vec<Batch> {
    assert!(batch_size > 0 && max_len > 0, "make_batches: degenerate sizes");
    let mut order: Vec<usize> = (0..ds.n_users()).collect();
    if let Some((seed, epoch)) = shuffle {
        let mut rng = derive_rng(seed, &[stream::SHUFFLE, epoch]);
        order.shuffle(&mut rng);
    }
    let mut out = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let examples: Vec<Example<'_>> = chunk.iter().map(|&u| ds.example(u, split)).collect();
        let width = examples
            .iter()
            .map(|e| e.prefix.len().min(max_len))
            .max()
            .expect("non-empty chunk");
        let mut items = vec![0usize; examples.len() * width];
        let mut lengths = Vec::with_capacity(examples.len());
        let mut targets = Vec::with_capacity(examples.len());
        let mut users = Vec::with_capacity(examples.len());
        for (r, e) in examples.iter().enumerate() {
            let tail = &e.prefix[e.prefix.len().saturating_sub(max_len)..];
            let start = width - tail.len(); // left padding
            items[r * width + start..(r + 1) * width].copy_from_slice(tail);
            lengths.push(tail.len());
            targets.push(e.target);
            users.push(e.user);
        }
        out.push(Batch { items, width, lengths, targets, users });
    }
    out
}

// ─── Synthetic taxonomy ──────────────────────────────────────────────────────

/// How a latent-leaf shift picks the next leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftScope {
    /// Redraw uniformly among leaves under the same top-level category
    /// (the current leaf included).
    Sibling,
    /// Redraw uniformly among all leaves (the current leaf included).
    CrossCategory,
}

/// A population segment: `share` of users walk with shift probability `pi`
/// and lengths uniform in `len_range`.
#[derive(Clone, Debug)]
pub struct UserClass {
    pub pi: f64,
    pub len_range: (usize, usize),
    pub share: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    /// Children per level, root→leaf; e.g. `[4, 4, 4]` is a depth-3 tree.
    pub branching: Vec<usize>,
    pub items_per_leaf: usize,
    pub n_users: usize,
    pub classes: Vec<UserClass>,
    pub scope: ShiftScope,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Single-class convenience: every user shares one π and length range.
    pub fn uniform(
        branching: Vec<usize>,
        items_per_leaf: usize,
        n_users: usize,
        pi: f64,
        len_range: (usize, usize),
        scope: ShiftScope,
        seed: u64,
    ) -> Self {
        SyntheticConfig {
            branching,
            items_per_leaf,
            n_users,
            classes: vec![UserClass { pi, len_range, share: 1.0 }],
            scope,
            seed,
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.branching.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.branching.is_empty() || self.branching.contains(&0) {
            return Err(Error::contract("branching factors must all be ≥ 1"));
        }
        if self.items_per_leaf == 0 || self.n_users == 0 {
            return Err(Error::contract("need at least one item per leaf and one user"));
        }
        if self.classes.is_empty() {
            return Err(Error::contract("at least one user class required"));
        }
        for c in &self.classes {
            if !(0.0..=1.0).contains(&c.pi) {
                return Err(Error::contract(format!("shift probability {} outside [0,1]", c.pi)));
            }
            if c.len_range.0 < 5 || c.len_range.0 > c.len_range.1 {
                return Err(Error::contract(
                    "length range must satisfy 5 ≤ lo ≤ hi (leave-one-out needs ≥5)",
                ));
            }
            if c.share <= 0.0 {
                return Err(Error::contract("class shares must be positive"));
            }
        }
        Ok(())
    }
}

/// Generate a dataset of latent-intent walks over the taxonomy. Each user
/// starts at a uniform leaf; every step emits a uniform item from the current
/// leaf, then shifts leaf with probability π under the configured scope.
/// Item ids are dense with leaf blocks contiguous: leaf `l` owns
/// `l·items_per_leaf+1 ..= (l+1)·items_per_leaf`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<InteractionDataset> {
    cfg.validate()?;
    let n_leaves = cfg.n_leaves();
    let n_items = n_leaves * cfg.items_per_leaf;
    // Leaves per top-level category (tree is uniform by construction).
    let leaves_per_cat: usize = cfg.branching[1..].iter().product();
    let n_categories = cfg.branching[0];

    // Class assignment: deterministic proportional split, remainder to the
    // largest-share classes first (keeps "half and half" exact for 2 classes).
    let share_sum: f64 = cfg.classes.iter().map(|c| c.share).sum();
    let mut counts: Vec<usize> = cfg
        .classes
        .iter()
        .map(|c| (c.share / share_sum * cfg.n_users as f64).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..cfg.classes.len()).collect();
    order.sort_by(|&a, &b| {
        cfg.classes[b].share.partial_cmp(&cfg.classes[a].share).unwrap().then(a.cmp(&b))
    });
    let mut oi = 0;
    while assigned < cfg.n_users {
        counts[order[oi % order.len()]] += 1;
        assigned += 1;
        oi += 1;
    }

    let width = cfg.n_users.to_string().len().max(5);
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut user_pi = Vec::with_capacity(cfg.n_users);
    let mut uid = 0usize;
    for (ci, class) in cfg.classes.iter().enumerate() {
        for _ in 0..counts[ci] {
            let mut rng = derive_rng(cfg.seed, &[stream::SYNTH, uid as u64]);
            let len = rng.gen_range(class.len_range.0..=class.len_range.1);
            let mut leaf = rng.gen_range(0..n_leaves);
            let mut items = Vec::with_capacity(len);
            for _ in 0..len {
                let item = leaf * cfg.items_per_leaf + rng.gen_range(0..cfg.items_per_leaf) + 1;
                items.push(item);
                if rng.gen::<f64>() < class.pi {
                    leaf = match cfg.scope {
                        ShiftScope::CrossCategory => rng.gen_range(0..n_leaves),
                        ShiftScope::Sibling => {
                            let cat = leaf / leaves_per_cat;
                            cat * leaves_per_cat + rng.gen_range(0..leaves_per_cat)
                        }
                    };
                }
            }
            users.push(UserSeq { key: format!("u{uid:0width$}"), items });
            user_pi.push(class.pi);
            uid += 1;
        }
    }

    let key_width = n_items.to_string().len();
    let mut leaf_of_item = vec![0usize; n_items + 1];
    let mut category_of_item = vec![0usize; n_items + 1];
    for id in 1..=n_items {
        let leaf = (id - 1) / cfg.items_per_leaf;
        leaf_of_item[id] = leaf;
        category_of_item[id] = leaf / leaves_per_cat;
    }

    Ok(InteractionDataset {
        users,
        n_items,
        item_keys: (0..=n_items)
            .map(|id| if id == 0 { "<pad>".into() } else { format!("i{id:0key_width$}") })
            .collect(),
        labels: Some(TaxonomyLabels {
            leaf_of_item,
            category_of_item,
            n_leaves,
            n_categories,
        }),
        user_pi: Some(user_pi),
    })
}

// ─── Export ──────────────────────────────────────────────────────────────────

/// Interactions as loadable TSV (timestamps are step indices).
pub fn interactions_tsv(ds: &InteractionDataset) -> String {
    let mut out = String::new();
    for u in &ds.users {
        for (t, &item) in u.items.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}", u.key, ds.item_keys[item], t);
        }
    }
    out
}

/// Ground-truth label sidecar: `item_key \t leaf \t category`.
pub fn labels_tsv(ds: &InteractionDataset) -> Option<String> {
    let labels = ds.labels.as_ref()?;
    let mut out = String::new();
    for id in 1..=ds.n_items {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            ds.item_keys[id], labels.leaf_of_item[id], labels.category_of_item[id]
        );
    }
    Some(out)
}

/// Per-user sidecar for synthetic sets: `user_key \t pi \t length`.
pub fn users_tsv(ds: &InteractionDataset) -> Option<String> {
    let pis = ds.user_pi.as_ref()?;
    let mut out = String::new();
    for (u, pi) in ds.users.iter().zip(pis) {
        let _ = writeln!(out, "{}\t{}\t{}", u.key, pi, u.items.len());
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tsv(rows: &[(&str, &str, i64)]) -> String {
        rows.iter().map(|(u, i, t)| format!("{u}\t{i}\t{t}\n")).collect()
    }

    /// 5 users over 6 shared items: every user has 6 ≥ 5 interactions and
    /// every item 5 occurrences, so nothing is filtered.
    #[test]
    fn five_core_retains_saturated_data() {
        let mut rows = Vec::new();
        for u in 0..5 {
            for i in 0..6 {
                rows.push((format!("u{u}"), format!("i{i}"), i as i64));
            }
        }
        let text: String =
            rows.iter().map(|(u, i, t)| format!("{u}\t{i}\t{t}\n")).collect();
        let ds = parse_interactions(&text).unwrap();
        assert_eq!(ds.n_users(), 5);
        assert_eq!(ds.n_items, 6);
    }

    #[test]
    fn five_core_drops_short_user_and_cascades() {
        // u0..u4 share items i0..i5 (stable core). u5 has 4 interactions →
        // dropped; its private item i9 then has 0 occurrences and vanishes.
        let mut rows = Vec::new();
        for u in 0..5 {
            for i in 0..6 {
                rows.push((format!("u{u}"), format!("i{i}"), i as i64));
            }
        }
        for t in 0..4 {
            rows.push(("u5".to_string(), "i9".to_string(), t as i64));
        }
        let text: String =
            rows.iter().map(|(u, i, t)| format!("{u}\t{i}\t{t}\n")).collect();
        let ds = parse_interactions(&text).unwrap();
        assert_eq!(ds.n_users(), 5);
        assert_eq!(ds.n_items, 6);
        assert!(ds.users.iter().all(|u| u.key != "u5"));
    }

    #[test]
    fn five_core_boundary_user_of_exactly_five_survives() {
        // One user with exactly 5 interactions over 5 items; pad item counts
        // to ≥5 with four more users sharing the same items.
        let mut rows = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                rows.push((format!("u{u}"), format!("i{i}"), i as i64));
            }
        }
        let text: String =
            rows.iter().map(|(u, i, t)| format!("{u}\t{i}\t{t}\n")).collect();
        let ds = parse_interactions(&text).unwrap();
        assert_eq!(ds.n_users(), 5);
        assert!(ds.users.iter().all(|u| u.items.len() == 5));
    }

    #[test]
    fn empty_after_filter_is_contract_error() {
        let text = tsv(&[("a", "x", 1), ("a", "y", 2), ("b", "x", 1)]);
        match parse_interactions(&text) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let text = "u1\ti1\t3\nu1\ti2\n";
        match parse_interactions(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = "u1\ti1\tnot_a_number\n";
        match parse_interactions(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn chronological_sort_with_file_order_tiebreak() {
        // Same timestamps → file order decides; later timestamp sorts last.
        let mut rows = vec![
            ("u0", "i2", 7),
            ("u0", "i0", 5),
            ("u0", "i1", 5),
            ("u0", "i3", 9),
            ("u0", "i4", 9),
        ];
        // Pad item occurrences with 4 more users over the same items.
        let mut all: Vec<(String, String, i64)> =
            rows.drain(..).map(|(u, i, t)| (u.into(), i.into(), t)).collect();
        for u in 1..5 {
            for i in 0..5 {
                all.push((format!("u{u}"), format!("i{i}"), 100 + i as i64));
            }
        }
        let text: String = all.iter().map(|(u, i, t)| format!("{u}\t{i}\t{t}\n")).collect();
        let ds = parse_interactions(&text).unwrap();
        let u0 = ds.users.iter().find(|u| u.key == "u0").unwrap();
        let keys: Vec<&str> = u0.items.iter().map(|&i| ds.item_keys[i].as_str()).collect();
        assert_eq!(keys, ["i0", "i1", "i2", "i3", "i4"]);
    }

    #[test]
    fn reingestion_is_bit_stable() {
        let cfg = SyntheticConfig::uniform(vec![2, 2], 8, 30, 0.3, (6, 12), ShiftScope::CrossCategory, 11);
        let ds = generate_synthetic(&cfg).unwrap();
        let text = interactions_tsv(&ds);
        let a = parse_interactions(&text).unwrap();
        let b = parse_interactions(&text).unwrap();
        assert_eq!(a.n_items, b.n_items);
        assert_eq!(a.item_keys, b.item_keys);
        for (x, y) in a.users.iter().zip(&b.users) {
            assert_eq!(x.key, y.key);
            assert_eq!(x.items, y.items);
        }
    }

    #[test]
    fn leave_one_out_views_follow_the_protocol() {
        let cfg = SyntheticConfig::uniform(vec![2, 2], 8, 10, 0.2, (5, 5), ShiftScope::CrossCategory, 3);
        let ds = generate_synthetic(&cfg).unwrap();
        let items = ds.users[0].items.clone();
        assert_eq!(items.len(), 5);
        let tr = ds.example(0, Split::Train);
        let va = ds.example(0, Split::Valid);
        let te = ds.example(0, Split::Test);
        // [i1..i5] → train prefix [i1,i2] with target i3; valid target i4; test target i5.
        assert_eq!(tr.prefix, &items[..2]);
        assert_eq!(tr.target, items[2]);
        assert_eq!(va.prefix, &items[..3]);
        assert_eq!(va.target, items[3]);
        assert_eq!(te.prefix, &items[..4]);
        assert_eq!(te.target, items[4]);
    }

    #[test]
    fn train_view_never_sees_valid_or_test_targets() {
        let cfg = SyntheticConfig::uniform(vec![2, 2], 6, 40, 0.5, (5, 15), ShiftScope::CrossCategory, 9);
        let ds = generate_synthetic(&cfg).unwrap();
        for u in 0..ds.n_users() {
            let full = &ds.users[u].items;
            let n = full.len();
            let tr = ds.example(u, Split::Train);
            // The training prefix and target live strictly before the held-out pair.
            assert!(tr.prefix.len() + 1 <= n - 2);
            assert_eq!(tr.target, full[n - 3]);
        }
    }

    #[test]
    fn batches_are_left_padded_and_truncate_recent() {
        let cfg = SyntheticConfig::uniform(vec![2, 2], 6, 25, 0.4, (8, 20), ShiftScope::CrossCategory, 21);
        let ds = generate_synthetic(&cfg).unwrap();
        let max_len = 6;
        let batches = make_batches(&ds, Split::Test, 8, max_len, None);
        let total: usize = batches.iter().map(Batch::rows).sum();
        assert_eq!(total, ds.n_users());
        for b in &batches {
            assert!(b.width <= max_len);
            for r in 0..b.rows() {
                let row = &b.items[r * b.width..(r + 1) * b.width];
                let len = b.lengths[r];
                assert!(row[..b.width - len].iter().all(|&i| i == 0), "padding must be on the left");
                assert!(row[b.width - len..].iter().all(|&i| i != 0), "no padding inside the sequence");
                assert_ne!(b.targets[r], 0, "targets are real items");
                // Truncation keeps the most recent items.
                let e = ds.example(b.users[r], Split::Test);
                let tail = &e.prefix[e.prefix.len().saturating_sub(max_len)..];
                assert_eq!(&row[b.width - len..], tail);
            }
        }
    }

    #[test]
    fn shuffling_is_epoch_deterministic_and_covers_all_users() {
        let cfg = SyntheticConfig::uniform(vec![2, 2], 6, 30, 0.4, (6, 10), ShiftScope::CrossCategory, 5);
        let ds = generate_synthetic(&cfg).unwrap();
        let a = make_batches(&ds, Split::Train, 7, 10, Some((99, 4)));
        let b = make_batches(&ds, Split::Train, 7, 10, Some((99, 4)));
        let c = make_batches(&ds, Split::Train, 7, 10, Some((99, 5)));
        let users =
            |bs: &[Batch]| bs.iter().flat_map(|b| b.users.clone()).collect::<Vec<_>>();
        assert_eq!(users(&a), users(&b), "same (seed, epoch) → same order");
        assert_ne!(users(&a), users(&c), "different epoch → different order");
        let mut sorted = users(&a);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_shapes_and_label_consistency() {
        let cfg = SyntheticConfig::uniform(
            vec![4, 4, 4],
            10,
            50,
            0.2,
            (6, 12),
            ShiftScope::CrossCategory,
            7,
        );
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.n_items, 640, "4×4×4 leaves × 10 items");
        let labels = ds.labels.as_ref().unwrap();
        assert_eq!(labels.n_leaves, 64);
        assert_eq!(labels.n_categories, 4);
        // item→leaf is a function consistent with the contiguous block layout.
        for id in 1..=ds.n_items {
            assert_eq!(labels.leaf_of_item[id], (id - 1) / 10);
            assert_eq!(labels.category_of_item[id], labels.leaf_of_item[id] / 16);
        }
    }

    #[test]
    fn pi_zero_means_single_leaf_per_user() {
        let cfg = SyntheticConfig::uniform(vec![3, 3], 5, 40, 0.0, (6, 15), ShiftScope::CrossCategory, 13);
        let ds = generate_synthetic(&cfg).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for u in &ds.users {
            let leaf = labels.leaf_of_item[u.items[0]];
            assert!(u.items.iter().all(|&i| labels.leaf_of_item[i] == leaf));
        }
    }

    /// π=1 with cross-category scope: consecutive items share a leaf exactly
    /// when the uniform redraw lands on the same leaf, probability 1/|leaves|.
    /// Checked against a 3σ binomial envelope.
    #[test]
    fn pi_one_cross_scope_matches_binomial_oracle() {
        let cfg = SyntheticConfig::uniform(vec![4, 4], 4, 400, 1.0, (10, 20), ShiftScope::CrossCategory, 17);
        let ds = generate_synthetic(&cfg).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        let mut same = 0u64;
        let mut pairs = 0u64;
        for u in &ds.users {
            for w in u.items.windows(2) {
                pairs += 1;
                if labels.leaf_of_item[w[0]] == labels.leaf_of_item[w[1]] {
                    same += 1;
                }
            }
        }
        let p = 1.0 / 16.0;
        let mean = pairs as f64 * p;
        let sigma = (pairs as f64 * p * (1.0 - p)).sqrt();
        let dev = (same as f64 - mean).abs();
        assert!(
            dev <= 3.0 * sigma,
            "same-leaf pairs {same} vs expected {mean:.1} ± {:.1}",
            3.0 * sigma
        );
    }

    #[test]
    fn sibling_scope_stays_within_category() {
        let cfg = SyntheticConfig::uniform(vec![3, 4], 4, 60, 1.0, (8, 16), ShiftScope::Sibling, 19);
        let ds = generate_synthetic(&cfg).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for u in &ds.users {
            let cat = labels.category_of_item[u.items[0]];
            assert!(
                u.items.iter().all(|&i| labels.category_of_item[i] == cat),
                "sibling-scope walk crossed categories"
            );
        }
    }

    #[test]
    fn mixed_classes_split_users_exactly() {
        let cfg = SyntheticConfig {
            branching: vec![2, 2],
            items_per_leaf: 6,
            n_users: 31,
            classes: vec![
                UserClass { pi: 0.05, len_range: (6, 10), share: 0.5 },
                UserClass { pi: 0.6, len_range: (6, 10), share: 0.5 },
            ],
            scope: ShiftScope::CrossCategory,
            seed: 23,
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let pis = ds.user_pi.as_ref().unwrap();
        let low = pis.iter().filter(|&&p| p == 0.05).count();
        let high = pis.iter().filter(|&&p| p == 0.6).count();
        assert_eq!(low + high, 31);
        assert!(low.abs_diff(high) <= 1, "shares should split as evenly as possible");
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = SyntheticConfig::uniform(vec![2, 3], 5, 20, 0.3, (6, 9), ShiftScope::CrossCategory, 31);
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        for (x, y) in a.users.iter().zip(&b.users) {
            assert_eq!(x.items, y.items);
        }
        let mut cfg2 = cfg.clone();
        cfg2.seed = 32;
        let c = generate_synthetic(&cfg2).unwrap();
        assert!(a.users.iter().zip(&c.users).any(|(x, y)| x.items != y.items));
    }

    #[test]
    fn sidecars_round_trip_labels_through_files() {
        let cfg = SyntheticConfig::uniform(vec![2, 2], 8, 25, 0.4, (6, 12), ShiftScope::CrossCategory, 37);
        let ds = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let inter = dir.path().join("interactions.tsv");
        let labs = dir.path().join("labels.tsv");
        std::fs::write(&inter, interactions_tsv(&ds)).unwrap();
        std::fs::write(&labs, labels_tsv(&ds).unwrap()).unwrap();
        let loaded = load_interactions(&inter).unwrap();
        let labels = load_labels(&labs, &loaded).unwrap();
        for id in 1..=loaded.n_items {
            let orig_id: usize = loaded.item_keys[id][1..].parse().unwrap();
            assert_eq!(labels.leaf_of_item[id], ds.labels.as_ref().unwrap().leaf_of_item[orig_id]);
        }
    }

    /// Ingestion of a Table-1-shaped file, enabled only when the canonical
    /// Beauty TSV is provided out of band.
    #[test]
    fn beauty_statistics_match_when_file_supplied() {
        let Ok(path) = std::env::var("DTREC_BEAUTY_TSV") else {
            eprintln!("skipping: set DTREC_BEAUTY_TSV to the canonical Beauty interactions file");
            return;
        };
        let ds = load_interactions(path).unwrap();
        assert_eq!(ds.n_users(), 22_363);
        assert_eq!(ds.n_items, 12_101);
        let interactions: usize = ds.users.iter().map(|u| u.items.len()).sum();
        assert_eq!(interactions, 198_502);
    }
}
