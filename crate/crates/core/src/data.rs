//! Implicit-feedback interaction logs: loading, re-indexing, the
//! train/validation/test split and BPR triplet sampling.
//!
//! Input files hold one interaction per line, `user item` separated by
//! whitespace or tabs. Lines starting with `#` and blank lines are skipped,
//! extra columns (ratings, timestamps) are ignored.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{self, Rng, Stream};
use crate::{Error, Result};

/// Bijection between raw tokens and `[0, n)`, in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Deduplicated, re-indexed interactions before splitting.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub users: IdMap,
    pub items: IdMap,
    /// `(user, item)` pairs in order of first appearance.
    pub pairs: Vec<(usize, usize)>,
    /// SHA-256 of the source bytes, hex encoded.
    pub fingerprint: String,
    pub source: Option<PathBuf>,
}

impl InteractionLog {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut users = IdMap::default();
        let mut items = IdMap::default();
        let mut seen = std::collections::HashSet::new();
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(user), Some(item)) = (fields.next(), fields.next()) else {
                return Err(Error::Parse {
                    path: source.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected `user item`, got `{line}`"),
                });
            };
            let pair = (users.intern(user), items.intern(item));
            if seen.insert(pair) {
                pairs.push(pair);
            }
        }
        if pairs.is_empty() {
            return Err(Error::EmptyDataset(source.to_path_buf()));
        }
        Ok(Self {
            users,
            items,
            pairs,
            fingerprint: sha256_hex(text.as_bytes()),
            source: Some(source.to_path_buf()),
        })
    }

    /// Builds a log directly from integer pairs; tokens are the decimal ids.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut text = String::new();
        for (u, i) in pairs {
            text.push_str(&format!("{u}\t{i}\n"));
        }
        let mut log = Self::parse(&text, Path::new("<memory>"))?;
        log.source = None;
        Ok(log)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    InteractionLog::parse(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }
}

/// Split interactions. Pair lists are sorted by `(user, item)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    train_pos: Vec<Vec<usize>>,
    validation_pos: Vec<Vec<usize>>,
    test_pos: Vec<Vec<usize>>,
}

fn group_by_user(num_users: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_users];
    for &(u, i) in pairs {
        out[u].push(i);
    }
    for items in &mut out {
        items.sort_unstable();
    }
    out
}

impl InteractionDataset {
    pub fn new(
        num_users: usize,
        num_items: usize,
        mut train: Vec<(usize, usize)>,
        mut validation: Vec<(usize, usize)>,
        mut test: Vec<(usize, usize)>,
    ) -> Result<Self> {
        for (name, part) in [("train", &train), ("validation", &validation), ("test", &test)] {
            if let Some(&(u, i)) = part.iter().find(|&&(u, i)| u >= num_users || i >= num_items) {
                return Err(Error::Degenerate(format!(
                    "{name} pair ({u}, {i}) outside {num_users} users × {num_items} items"
                )));
            }
        }
        train.sort_unstable();
        validation.sort_unstable();
        test.sort_unstable();
        let ds = Self {
            num_users,
            num_items,
            train_pos: group_by_user(num_users, &train),
            validation_pos: group_by_user(num_users, &validation),
            test_pos: group_by_user(num_users, &test),
            train,
            validation,
            test,
        };
        let orphans = ds.users_without_train().count();
        if orphans > 0 {
            log::warn!("{orphans} users have no train positives; they are skipped in training and evaluation");
        }
        Ok(ds)
    }

    pub fn num_entities(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn train_positives(&self, user: usize) -> &[usize] {
        &self.train_pos[user]
    }

    pub fn positives(&self, partition: Partition, user: usize) -> &[usize] {
        match partition {
            Partition::Train => &self.train_pos[user],
            Partition::Validation => &self.validation_pos[user],
            Partition::Test => &self.test_pos[user],
        }
    }

    pub fn pairs(&self, partition: Partition) -> &[(usize, usize)] {
        match partition {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    pub fn is_train_positive(&self, user: usize, item: usize) -> bool {
        self.train_pos[user].binary_search(&item).is_ok()
    }

    pub fn users_without_train(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_users).filter(|&u| self.train_pos[u].is_empty())
    }

    /// Interaction count per item in the train partition.
    pub fn item_popularity(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items];
        for &(_, i) in &self.train {
            counts[i] += 1;
        }
        counts
    }
}

/// Sizes of the three partitions for `total` pairs.
pub fn split_sizes(total: usize, train_frac: f64, val_frac_of_train: f64) -> (usize, usize, usize) {
    let train_all = ((total as f64) * train_frac).round() as usize;
    let train_all = train_all.min(total);
    let validation = ((train_all as f64) * val_frac_of_train).round() as usize;
    (train_all - validation, validation, total - train_all)
}

/// Global shuffled split. The pair list is shuffled with Fisher–Yates on
/// the [`Stream::Split`] stream; the first `round(0.1 · round(0.8 · n))`
/// shuffled pairs form validation, the rest of the first `round(0.8 · n)`
/// form train and the remainder is test.
pub fn split(
    log: &InteractionLog,
    seed: u64,
    train_frac: f64,
    val_frac_of_train: f64,
) -> Result<InteractionDataset> {
    if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&val_frac_of_train) {
        return Err(Error::Config(format!(
            "split fractions must lie in [0, 1], got {train_frac} and {val_frac_of_train}"
        )));
    }
    let mut order = log.pairs.clone();
    rng::shuffle(&mut rng::stream(seed, Stream::Split), &mut order);
    let (n_train, n_val, _) = split_sizes(order.len(), train_frac, val_frac_of_train);
    let test = order.split_off(n_train + n_val);
    let train = order.split_off(n_val);
    InteractionDataset::new(log.num_users(), log.num_items(), train, order, test)
}

/// One `(user, positive item, negative item)` training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BprTriplet {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
}

/// `negatives` triplets for one `(user, positive)` pair, with negatives
/// drawn uniformly (by rejection) from items outside the user's train
/// positives.
pub fn sample_triplets(
    dataset: &InteractionDataset,
    user: usize,
    pos_item: usize,
    negatives: usize,
    rng: &mut Rng,
) -> Result<Vec<BprTriplet>> {
    let mut out = Vec::with_capacity(negatives);
    sample_into(dataset, user, pos_item, negatives, rng, &mut out)?;
    Ok(out)
}

fn sample_into(
    dataset: &InteractionDataset,
    user: usize,
    pos_item: usize,
    negatives: usize,
    rng: &mut Rng,
    out: &mut Vec<BprTriplet>,
) -> Result<()> {
    let positives = dataset.train_positives(user);
    if positives.is_empty() {
        return Err(Error::Degenerate(format!("user {user} has no train positives")));
    }
    if positives.len() >= dataset.num_items {
        return Err(Error::Degenerate(format!(
            "user {user} has every item as a positive; no negatives to sample"
        )));
    }
    for _ in 0..negatives {
        let neg_item = loop {
            let candidate = rng::uniform_index(rng, dataset.num_items);
            if positives.binary_search(&candidate).is_err() {
                break candidate;
            }
        };
        out.push(BprTriplet {
            user,
            pos_item,
            neg_item,
        });
    }
    Ok(())
}

/// Triplets for every train pair, in train-pair order.
pub fn epoch_triplets(
    dataset: &InteractionDataset,
    negatives: usize,
    rng: &mut Rng,
) -> Result<Vec<BprTriplet>> {
    let mut out = Vec::with_capacity(dataset.train.len() * negatives);
    for &(user, item) in &dataset.train {
        sample_into(dataset, user, item, negatives, rng, &mut out)?;
    }
    Ok(out)
}

/// Record of a split written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub source: Option<String>,
    pub source_sha256: String,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac_of_train: f64,
    pub num_users: usize,
    pub num_items: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

pub const SPLIT_FORMAT_VERSION: u32 = 1;
pub const SPLIT_MANIFEST: &str = "split.json";
pub const ID_MAP_FILE: &str = "id_map.tsv";

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn pairs_text(pairs: &[(usize, usize)]) -> String {
    let mut s = String::with_capacity(pairs.len() * 12);
    for (u, i) in pairs {
        s.push_str(&format!("{u}\t{i}\n"));
    }
    s
}

/// Writes `train.txt`, `validation.txt`, `test.txt`, `id_map.tsv` and
/// `split.json` under `dir`. Output depends only on the inputs.
pub fn write_split(
    dir: &Path,
    log: &InteractionLog,
    dataset: &InteractionDataset,
    seed: u64,
    train_frac: f64,
    val_frac_of_train: f64,
) -> Result<SplitManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for part in [Partition::Train, Partition::Validation, Partition::Test] {
        write_text(&dir.join(format!("{}.txt", part.name())), &pairs_text(dataset.pairs(part)))?;
    }
    let mut map = String::from("# kind\tid\ttoken\n");
    for (kind, ids) in [("user", &log.users), ("item", &log.items)] {
        for (id, token) in ids.tokens().iter().enumerate() {
            map.push_str(&format!("{kind}\t{id}\t{token}\n"));
        }
    }
    write_text(&dir.join(ID_MAP_FILE), &map)?;
    let manifest = SplitManifest {
        format_version: SPLIT_FORMAT_VERSION,
        source: log.source.as_ref().map(|p| p.display().to_string()),
        source_sha256: log.fingerprint.clone(),
        seed,
        train_frac,
        val_frac_of_train,
        num_users: dataset.num_users,
        num_items: dataset.num_items,
        train: dataset.train.len(),
        validation: dataset.validation.len(),
        test: dataset.test.len(),
    };
    write_text(&dir.join(SPLIT_MANIFEST), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(manifest)
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |field: Option<&str>| -> Result<usize> {
            field.and_then(|f| f.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected two integer ids, got `{line}`"),
            })
        };
        let mut fields = line.split_whitespace();
        out.push((parse(fields.next())?, parse(fields.next())?));
    }
    Ok(out)
}

pub fn read_split_manifest(dir: &Path) -> Result<SplitManifest> {
    let path = dir.join(SPLIT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text)?;
    if manifest.format_version != SPLIT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "split format version {} (expected {SPLIT_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn read_split(dir: &Path) -> Result<(SplitManifest, InteractionDataset)> {
    let manifest = read_split_manifest(dir)?;
    let part = |p: Partition| read_pairs(&dir.join(format!("{}.txt", p.name())));
    let dataset = InteractionDataset::new(
        manifest.num_users,
        manifest.num_items,
        part(Partition::Train)?,
        part(Partition::Validation)?,
        part(Partition::Test)?,
    )?;
    Ok((manifest, dataset))
}

/// SHA-256 over the three split files, in partition order.
pub fn split_fingerprint(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for part in [Partition::Train, Partition::Validation, Partition::Test] {
        let path = dir.join(format!("{}.txt", part.name()));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn log(text: &str) -> Result<InteractionLog> {
        InteractionLog::parse(text, Path::new("test.txt"))
    }

    #[test]
    fn three_line_file() {
        let l = log("u1 iA\nu1 iB\nu2 iA\n").unwrap();
        assert_eq!((l.num_users(), l.num_items(), l.pairs.len()), (2, 2, 3));
        assert_eq!(l.pairs, vec![(0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn duplicates_comments_and_extra_columns() {
        let l = log("# header\nu1\tiA\t5\t881250949\n\nu1 iA\n").unwrap();
        assert_eq!(l.pairs.len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match log("u1 iA\nlonely\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(log("# nothing\n\n"), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn hundred_pairs_split_72_8_20() {
        assert_eq!(split_sizes(100, 0.8, 0.1), (72, 8, 20));
        let l = InteractionLog::from_pairs((0..100).map(|k| (k % 10, k / 10))).unwrap();
        let ds = split(&l, 3, 0.8, 0.1).unwrap();
        assert_eq!((ds.train.len(), ds.validation.len(), ds.test.len()), (72, 8, 20));
        assert_eq!(ds, split(&l, 3, 0.8, 0.1).unwrap());
        assert_ne!(ds, split(&l, 4, 0.8, 0.1).unwrap());
    }

    #[test]
    fn negatives_avoid_positives() {
        let l = InteractionLog::from_pairs([(0, 0), (1, 1), (1, 2)]).unwrap();
        let ds = InteractionDataset::new(2, 3, l.pairs.clone(), vec![], vec![]).unwrap();
        let mut rng = rng::stream(1, Stream::Sampler);
        for _ in 0..200 {
            let t = sample_triplets(&ds, 0, 0, 5, &mut rng).unwrap();
            assert_eq!(t.len(), 5);
            assert!(t.iter().all(|t| t.neg_item == 1 || t.neg_item == 2));
        }
    }

    #[test]
    fn saturated_user_is_degenerate() {
        let ds = InteractionDataset::new(1, 2, vec![(0, 0), (0, 1)], vec![], vec![]).unwrap();
        let mut rng = rng::stream(1, Stream::Sampler);
        assert!(matches!(sample_triplets(&ds, 0, 0, 5, &mut rng), Err(Error::Degenerate(_))));
    }

    #[test]
    fn split_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = log("a x\na y\nb x\nb z\nc y\nc z\nd x\nd w\ne w\ne y\n").unwrap();
        let ds = split(&l, 11, 0.8, 0.1).unwrap();
        write_split(dir.path(), &l, &ds, 11, 0.8, 0.1).unwrap();
        let (manifest, back) = read_split(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(manifest.train + manifest.validation + manifest.test, 10);
        let map = fs::read_to_string(dir.path().join(ID_MAP_FILE)).unwrap();
        assert!(map.contains("user\t0\ta\n"));
        assert!(map.contains("item\t3\tw\n"));
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_cover(
            pairs in proptest::collection::hash_set((0usize..30, 0usize..40), 1..300),
            seed in any::<u64>(),
        ) {
            let l = InteractionLog::from_pairs(pairs.iter().copied()).unwrap();
            let ds = split(&l, seed, 0.8, 0.1).unwrap();
            let all: Vec<_> = ds.train.iter().chain(&ds.validation).chain(&ds.test).copied().collect();
            let set: HashSet<_> = all.iter().copied().collect();
            prop_assert_eq!(all.len(), l.pairs.len());
            prop_assert_eq!(set.len(), l.pairs.len());
            prop_assert!(all.iter().all(|&(u, i)| u < ds.num_users && i < ds.num_items));
        }

        #[test]
        fn reindexing_is_a_bijection(tokens in proptest::collection::vec("[a-z]{1,3}", 1..60)) {
            let text: String = tokens.iter().map(|t| format!("{t} item_{t}\n")).collect();
            let l = log(&text).unwrap();
            let distinct: HashSet<_> = tokens.iter().collect();
            prop_assert_eq!(l.users.len(), distinct.len());
            for (id, tok) in l.users.tokens().iter().enumerate() {
                prop_assert_eq!(l.users.id(tok), Some(id));
            }
        }
    }
}
