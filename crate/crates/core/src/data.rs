//! Interaction logs, chronological user sequences, leave-one-out splits and
//! negative sampling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Fraction of malformed lines above which parsing fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

/// Negatives per positive during training.
pub const TRAIN_NEGATIVES: usize = 4;
/// Negatives per positive during evaluation.
pub const EVAL_NEGATIVES: usize = 99;

pub const DEFAULT_MIN_INTERACTIONS: usize = 5;
pub const DEFAULT_MAX_SEQ_LEN_AMAZON: usize = 50;
pub const DEFAULT_MAX_SEQ_LEN_MOVIELENS: usize = 200;

const CACHE_HEADER: &str = "ttt4rec-dataset v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    /// `UserID::MovieID::Rating::Timestamp`
    Movielens,
    /// `user,item,rating,timestamp`
    Amazon,
}

impl fmt::Display for LogFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogFormat::Movielens => write!(f, "movielens"),
            LogFormat::Amazon => write!(f, "amazon"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    /// Dense user id, starting at 1.
    pub user: u32,
    /// Dense item id, starting at 1.
    pub item: u32,
    pub rating: f32,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MalformedLine {
    /// 1-based.
    pub line: u64,
    pub content: String,
    pub reason: String,
}

/// Raw interaction records with original ids mapped to dense ones.
#[derive(Clone, Debug, Default)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    /// `user_ids[d - 1]` is the original id of dense user `d`.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub malformed: Vec<MalformedLine>,
}

#[derive(Default)]
struct Densifier {
    map: HashMap<String, u32>,
    names: Vec<String>,
}

impl Densifier {
    fn id(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.map.get(raw) {
            return id;
        }
        self.names.push(raw.to_string());
        let id = self.names.len() as u32;
        self.map.insert(raw.to_string(), id);
        id
    }
}

#[derive(Default)]
struct LogBuilder {
    users: Densifier,
    items: Densifier,
    records: Vec<Interaction>,
    malformed: Vec<MalformedLine>,
    lines: u64,
}

impl LogBuilder {
    fn push_fields(&mut self, line: u64, content: &str, fields: &[&str]) {
        self.lines += 1;
        let parsed = (|| {
            if fields.len() != 4 {
                return Err(format!("expected 4 fields, found {}", fields.len()));
            }
            let (user, item) = (fields[0].trim(), fields[1].trim());
            if user.is_empty() || item.is_empty() {
                return Err("empty user or item id".to_string());
            }
            let rating: f32 = fields[2]
                .trim()
                .parse()
                .map_err(|_| format!("rating '{}' is not numeric", fields[2]))?;
            if !rating.is_finite() {
                return Err(format!("rating '{}' is not finite", fields[2]));
            }
            let ts = fields[3].trim();
            let timestamp: i64 = ts
                .parse()
                .or_else(|_| ts.parse::<f64>().map(|v| v as i64))
                .map_err(|_| format!("timestamp '{}' is not numeric", fields[3]))?;
            Ok((user, item, rating, timestamp))
        })();
        match parsed {
            Ok((user, item, rating, timestamp)) => {
                let user = self.users.id(user);
                let item = self.items.id(item);
                self.records.push(Interaction {
                    user,
                    item,
                    rating,
                    timestamp,
                });
            }
            Err(reason) => self.malformed.push(MalformedLine {
                line,
                content: content.to_string(),
                reason,
            }),
        }
    }

    fn finish(self, path: &Path) -> Result<InteractionLog> {
        if self.lines == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "no interaction lines".into(),
            });
        }
        let bad = self.malformed.len() as f64;
        if bad > MAX_MALFORMED_FRACTION * self.lines as f64 || self.records.is_empty() {
            let sample: Vec<String> = self
                .malformed
                .iter()
                .take(3)
                .map(|m| format!("line {}: {} ({:?})", m.line, m.reason, m.content))
                .collect();
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!(
                    "{} of {} lines malformed; e.g. {}",
                    self.malformed.len(),
                    self.lines,
                    sample.join("; ")
                ),
            });
        }
        Ok(InteractionLog {
            records: self.records,
            user_ids: self.users.names,
            item_ids: self.items.names,
            malformed: self.malformed,
        })
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Parses MovieLens `::`-separated ratings from any reader; `path` only labels errors.
pub fn parse_movielens_reader(reader: impl Read, path: &Path) -> Result<InteractionLog> {
    let mut b = LogBuilder::default();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        b.push_fields(i as u64 + 1, &line, &fields);
    }
    b.finish(path)
}

pub fn parse_movielens(path: impl AsRef<Path>) -> Result<InteractionLog> {
    let path = path.as_ref();
    parse_movielens_reader(open(path)?, path)
}

/// Parses an Amazon ratings-only CSV (`user,item,rating,timestamp`, no header).
pub fn parse_amazon_reader(reader: impl Read, path: &Path) -> Result<InteractionLog> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut b = LogBuilder::default();
    for record in csv.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                b.lines += 1;
                b.malformed.push(MalformedLine {
                    line,
                    content: String::new(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let fields: Vec<&str> = record.iter().collect();
        let content = fields.join(",");
        b.push_fields(line, &content, &fields);
    }
    b.finish(path)
}

pub fn parse_amazon(path: impl AsRef<Path>) -> Result<InteractionLog> {
    let path = path.as_ref();
    parse_amazon_reader(open(path)?, path)
}

pub fn parse_log(format: LogFormat, path: impl AsRef<Path>) -> Result<InteractionLog> {
    match format {
        LogFormat::Movielens => parse_movielens(path),
        LogFormat::Amazon => parse_amazon(path),
    }
}

impl InteractionLog {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }
}

/// One user's items in chronological order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: u32,
    pub items: Vec<u32>,
    pub timestamps: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub sequences: Vec<UserSequence>,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "users={} items={} interactions={} density={:.6}",
            self.users, self.items, self.interactions, self.density
        )
    }
}

/// Groups the log per user, orders each user's items by timestamp (ties keep
/// file order) and drops users with fewer than `min_interactions` records.
pub fn build_sequences(
    log: &InteractionLog,
    min_interactions: usize,
    max_seq_len: usize,
) -> Result<Dataset> {
    if max_seq_len < 2 {
        return Err(Error::Config(format!(
            "max_seq_len must be at least 2, got {max_seq_len}"
        )));
    }
    let mut per_user: BTreeMap<u32, Vec<(i64, u32)>> = BTreeMap::new();
    for r in &log.records {
        per_user
            .entry(r.user)
            .or_default()
            .push((r.timestamp, r.item));
    }
    let min_len = min_interactions.max(2);
    let sequences: Vec<UserSequence> = per_user
        .into_iter()
        .filter(|(_, recs)| recs.len() >= min_len)
        .map(|(user, mut recs)| {
            recs.sort_by_key(|&(ts, _)| ts);
            UserSequence {
                user,
                items: recs.iter().map(|&(_, i)| i).collect(),
                timestamps: recs.iter().map(|&(t, _)| t).collect(),
            }
        })
        .collect();
    if sequences.is_empty() {
        return Err(Error::Input(format!(
            "no user has at least {min_len} interactions"
        )));
    }
    Ok(Dataset {
        sequences,
        vocab_size: log.num_items(),
        max_seq_len,
    })
}

impl Dataset {
    pub fn summary(&self) -> DatasetSummary {
        let users = self.sequences.len();
        let interactions = self.sequences.iter().map(|s| s.items.len()).sum();
        let items = self.vocab_size;
        DatasetSummary {
            users,
            items,
            interactions,
            density: interactions as f64 / (users as f64 * items as f64),
        }
    }

    pub fn write_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_cache_to(&mut w)
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_cache_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{CACHE_HEADER}")?;
        writeln!(w, "vocab_size {}", self.vocab_size)?;
        writeln!(w, "max_seq_len {}", self.max_seq_len)?;
        writeln!(w, "users {}", self.sequences.len())?;
        for s in &self.sequences {
            write!(w, "{}\t", s.user)?;
            for (k, (item, ts)) in s.items.iter().zip(&s.timestamps).enumerate() {
                if k > 0 {
                    write!(w, " ")?;
                }
                write!(w, "{item}:{ts}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let reader = BufReader::new(open(path)?);
        let mut lines = reader.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| err(format!("missing {what}")))?
                .map_err(|e| Error::io(path, e))
        };
        let header = next("header")?;
        if header != CACHE_HEADER {
            return Err(err(format!("unsupported cache header '{header}'")));
        }
        let mut field = |name: &str| -> Result<usize> {
            let line = next(name)?;
            line.strip_prefix(name)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| err(format!("bad '{name}' line: '{line}'")))
        };
        let vocab_size = field("vocab_size")?;
        let max_seq_len = field("max_seq_len")?;
        let users = field("users")?;
        let mut sequences = Vec::with_capacity(users);
        for k in 0..users {
            let line = next("user record")?;
            let bad = || err(format!("malformed user record {}", k + 1));
            let (user, rest) = line.split_once('\t').ok_or_else(bad)?;
            let user: u32 = user.parse().map_err(|_| bad())?;
            let mut items = Vec::new();
            let mut timestamps = Vec::new();
            for pair in rest.split(' ') {
                let (i, t) = pair.split_once(':').ok_or_else(bad)?;
                let item: u32 = i.parse().map_err(|_| bad())?;
                if item == 0 || item as usize > vocab_size {
                    return Err(err(format!("item {item} outside 1..={vocab_size}")));
                }
                items.push(item);
                timestamps.push(t.parse().map_err(|_| bad())?);
            }
            if items.len() < 2 {
                return Err(err(format!("user {user} has fewer than 2 items")));
            }
            sequences.push(UserSequence {
                user,
                items,
                timestamps,
            });
        }
        Ok(Dataset {
            sequences,
            vocab_size,
            max_seq_len,
        })
    }
}

/// Sorted set of item ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemSet(Vec<u32>);

impl ItemSet {
    pub fn contains(&self, id: u32) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

impl FromIterator<u32> for ItemSet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        let mut v: Vec<u32> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        ItemSet(v)
    }
}

/// Draws `k` distinct items uniformly from `1..=vocab_size` minus `excluded`.
pub fn sample_negatives(
    excluded: &ItemSet,
    k: usize,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<u32>> {
    let blocked = excluded
        .as_slice()
        .iter()
        .filter(|&&id| id >= 1 && id as usize <= vocab_size)
        .count();
    let available = vocab_size - blocked;
    if available < k {
        return Err(Error::InsufficientCandidates {
            requested: k,
            available,
        });
    }
    if available <= 4 * k {
        // Small pool: enumerate it and pick k positions.
        let pool: Vec<u32> = (1..=vocab_size as u32)
            .filter(|&id| !excluded.contains(id))
            .collect();
        return Ok(index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect());
    }
    let mut out: Vec<u32> = Vec::with_capacity(k);
    while out.len() < k {
        let id = rng.random_range(1..=vocab_size as u32);
        if !excluded.contains(id) && !out.contains(&id) {
            out.push(id);
        }
    }
    Ok(out)
}

/// Keeps the most recent `len` items and left-pads with 0 up to `len`.
pub fn pad_sequence(items: &[u32], len: usize) -> Vec<u32> {
    let tail = &items[items.len().saturating_sub(len)..];
    let mut out = vec![0; len - tail.len()];
    out.extend_from_slice(tail);
    out
}

/// Which prefixes of a training sequence become training targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainTargets {
    /// Only the final item, with everything before it as history.
    #[default]
    Last,
    /// Every item after the first, each with its own prefix as history. The
    /// sequence forward pass is shared across them.
    All,
}

/// A user's training sequence: the chronological items without the held-out one.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSequence {
    pub user: u32,
    pub items: Vec<u32>,
    /// Every item the user ever interacted with, test item included.
    pub seen: ItemSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestCase {
    pub user: u32,
    /// Chronological history, the positive excluded.
    pub history: Vec<u32>,
    pub positive: u32,
    pub seen: ItemSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<TrainSequence>,
    pub test: Vec<TestCase>,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

/// Holds out each user's last item for testing; the rest is for training.
pub fn split_leave_one_out(dataset: &Dataset) -> Result<Split> {
    let mut train = Vec::with_capacity(dataset.sequences.len());
    let mut test = Vec::with_capacity(dataset.sequences.len());
    for s in &dataset.sequences {
        let n = s.items.len();
        if n < 2 {
            return Err(Error::Input(format!(
                "user {} has {n} interactions, need at least 2",
                s.user
            )));
        }
        let seen: ItemSet = s.items.iter().copied().collect();
        train.push(TrainSequence {
            user: s.user,
            items: s.items[..n - 1].to_vec(),
            seen: seen.clone(),
        });
        test.push(TestCase {
            user: s.user,
            history: s.items[..n - 1].to_vec(),
            positive: s.items[n - 1],
            seen,
        });
    }
    Ok(Split {
        train,
        test,
        vocab_size: dataset.vocab_size,
        max_seq_len: dataset.max_seq_len,
    })
}

impl TrainSequence {
    /// Index of the first item inside the training window: the most recent
    /// `max_seq_len + 1` items.
    pub fn window_start(&self, max_seq_len: usize) -> usize {
        self.items.len().saturating_sub(max_seq_len + 1)
    }

    /// `(history, positive)` pairs this sequence contributes under `mode`.
    ///
    /// `Last` yields the final item with up to `max_seq_len` items before it.
    /// `All` yields every item of the training window after its first, each
    /// with the window prefix before it. A single-item sequence yields nothing.
    pub fn examples(&self, mode: TrainTargets, max_seq_len: usize) -> Vec<(Vec<u32>, u32)> {
        let n = self.items.len();
        if n < 2 {
            return Vec::new();
        }
        let ws = self.window_start(max_seq_len);
        let first = match mode {
            TrainTargets::Last => n - 1,
            TrainTargets::All => ws + 1,
        };
        (first..n)
            .map(|t| {
                (
                    self.items[ws.max(t.saturating_sub(max_seq_len))..t].to_vec(),
                    self.items[t],
                )
            })
            .collect()
    }
}

/// Successor-pattern data: each user walks consecutive item ids
/// `s, s+1, …` (wrapping after `num_items`), so the ideal next-item policy is
/// "last item + 1".
pub fn planted_successor_dataset(
    num_users: usize,
    num_items: usize,
    len_range: (usize, usize),
    max_seq_len: usize,
    seed: u64,
) -> Dataset {
    let (lo, hi) = len_range;
    assert!(
        lo >= 2 && hi >= lo && num_items > hi,
        "bad planted-pattern shape"
    );
    let sequences = (0..num_users)
        .map(|u| {
            let mut r = rng::stream(&[seed, u as u64]);
            let len = r.random_range(lo..=hi);
            let start = r.random_range(0..num_items as u32);
            let items: Vec<u32> = (0..len as u32)
                .map(|k| (start + k) % num_items as u32 + 1)
                .collect();
            UserSequence {
                user: u as u32 + 1,
                timestamps: (0..len as i64).collect(),
                items,
            }
        })
        .collect();
    Dataset {
        sequences,
        vocab_size: num_items,
        max_seq_len,
    }
}

/// Default history length for a log format.
pub fn default_max_seq_len(format: LogFormat) -> usize {
    match format {
        LogFormat::Movielens => DEFAULT_MAX_SEQ_LEN_MOVIELENS,
        LogFormat::Amazon => DEFAULT_MAX_SEQ_LEN_AMAZON,
    }
}
