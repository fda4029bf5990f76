//! Interaction ingestion, per-user sequences, chronological split and
//! sliding-window training instances.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{CaserError, Result};

/// Item index reserved for left padding. Its embedding is pinned to zero.
pub const PADDING: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// Whitespace separated (tabs or spaces).
    Tsv,
    Csv,
}

impl FromStr for InputFormat {
    type Err = CaserError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Self::Tsv),
            "csv" => Ok(Self::Csv),
            other => Err(CaserError::Config(format!("unknown input format `{other}`"))),
        }
    }
}

pub fn load_interactions(path: impl AsRef<Path>, format: InputFormat) -> Result<Vec<Interaction>> {
    let text = fs::read_to_string(path)?;
    parse_interactions(&text, format)
}

/// Parses `user item timestamp` rows, or `user item rating timestamp` when a
/// fourth column is present (the MovieLens column order). Ratings are
/// dropped: every row counts as one implicit interaction.
pub fn parse_interactions(text: &str, format: InputFormat) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = match format {
            InputFormat::Tsv => line.split_whitespace().collect(),
            InputFormat::Csv => line.split(',').map(str::trim).collect(),
        };
        let parse_err = |msg: String| CaserError::Parse { line: lineno + 1, msg };
        let ts_col = match cols.len() {
            3 => 2,
            n if n >= 4 => {
                cols[2]
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("bad rating `{}`", cols[2])))?;
                3
            }
            n => return Err(parse_err(format!("expected at least 3 columns, found {n}"))),
        };
        if cols[0].is_empty() || cols[1].is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let timestamp = cols[ts_col]
            .parse::<i64>()
            .map_err(|_| parse_err(format!("bad timestamp `{}`", cols[ts_col])))?;
        out.push(Interaction {
            user: cols[0].to_string(),
            item: cols[1].to_string(),
            timestamp,
        });
    }
    if out.is_empty() {
        return Err(CaserError::EmptyDataset("no interaction rows".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: u32,
    pub items: Vec<u32>,
}

/// Dense index <-> external id maps. `items[0]` is the padding slot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndexMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IndexMaps {
    pub fn user_index(&self, id: &str) -> Option<u32> {
        self.users.iter().position(|u| u == id).map(|i| i as u32)
    }

    pub fn item_index(&self, id: &str) -> Option<u32> {
        self.items.iter().skip(1).position(|u| u == id).map(|i| i as u32 + 1)
    }

    pub fn item_count(&self) -> usize {
        self.items.len().saturating_sub(1)
    }
}

/// Groups interactions per user, drops exact duplicate rows, filters users
/// and items with fewer than `min_feedback` interactions until nothing else
/// changes, and re-indexes densely: users from 0, items from 1.
pub fn build_sequences(interactions: &[Interaction], min_feedback: usize) -> Result<(Vec<UserSequence>, IndexMaps)> {
    if min_feedback == 0 {
        return Err(CaserError::Config("min_feedback must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    let mut rows: Vec<&Interaction> = interactions
        .iter()
        .filter(|r| seen.insert((&r.user, &r.item, r.timestamp)))
        .collect();

    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for r in &rows {
            *user_counts.entry(&r.user).or_default() += 1;
            *item_counts.entry(&r.item).or_default() += 1;
        }
        let before = rows.len();
        rows.retain(|r| user_counts[r.user.as_str()] >= min_feedback && item_counts[r.item.as_str()] >= min_feedback);
        if rows.len() == before {
            break;
        }
    }
    if rows.is_empty() {
        return Err(CaserError::EmptyDataset(format!(
            "every user or item has fewer than {min_feedback} interactions"
        )));
    }

    let mut maps = IndexMaps {
        users: Vec::new(),
        items: vec!["<pad>".to_string()],
    };
    let mut user_ix: HashMap<&str, u32> = HashMap::new();
    let mut item_ix: HashMap<&str, u32> = HashMap::new();
    let mut per_user: Vec<Vec<(i64, u32)>> = Vec::new();
    for r in &rows {
        let u = *user_ix.entry(&r.user).or_insert_with(|| {
            maps.users.push(r.user.clone());
            per_user.push(Vec::new());
            (maps.users.len() - 1) as u32
        });
        let i = *item_ix.entry(&r.item).or_insert_with(|| {
            maps.items.push(r.item.clone());
            (maps.items.len() - 1) as u32
        });
        per_user[u as usize].push((r.timestamp, i));
    }
    let sequences = per_user
        .into_iter()
        .enumerate()
        .map(|(u, mut events)| {
            // stable: equal timestamps keep file order
            events.sort_by_key(|&(ts, _)| ts);
            UserSequence {
                user: u as u32,
                items: events.into_iter().map(|(_, i)| i).collect(),
            }
        })
        .collect();
    Ok((sequences, maps))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user: u32,
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub test: Vec<u32>,
}

impl UserSplit {
    pub fn train_and_validation(&self) -> Vec<u32> {
        let mut v = self.train.clone();
        v.extend_from_slice(&self.validation);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
    pub user_count: usize,
    pub item_count: usize,
}

impl SplitDataset {
    pub const PADDING: u32 = PADDING;

    /// Training sequences only, one per user.
    pub fn train_sequences(&self) -> impl Iterator<Item = &[u32]> {
        self.users.iter().map(|u| u.train.as_slice())
    }
}

// Tolerates `0.7 * n` landing a hair above an integer.
fn ceil_fraction(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Per-user prefix split: `|train| = ceil(r_train * n)`,
/// `|train| + |validation| = ceil((r_train + r_validation) * n)`.
pub fn chronological_split(
    sequences: &[UserSequence],
    ratios: SplitRatios,
    user_count: usize,
    item_count: usize,
) -> Result<SplitDataset> {
    let total = ratios.train + ratios.validation + ratios.test;
    if (total - 1.0).abs() > 1e-9 || ratios.train <= 0.0 || ratios.validation < 0.0 || ratios.test < 0.0 {
        return Err(CaserError::Config(format!(
            "split ratios must be non-negative and sum to 1, got {total}"
        )));
    }
    let users = sequences
        .iter()
        .filter_map(|s| {
            let n = s.items.len();
            let train_end = ceil_fraction(ratios.train, n).min(n);
            let val_end = ceil_fraction(ratios.train + ratios.validation, n).clamp(train_end, n);
            if train_end == 0 {
                return None;
            }
            Some(UserSplit {
                user: s.user,
                train: s.items[..train_end].to_vec(),
                validation: s.items[train_end..val_end].to_vec(),
                test: s.items[val_end..].to_vec(),
            })
        })
        .collect();
    Ok(SplitDataset {
        users,
        user_count,
        item_count,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrainingInstance {
    pub user: u32,
    /// Exactly L items, oldest first, left-padded with [`PADDING`].
    pub prev_items: Vec<u32>,
    pub target_items: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstancePart {
    Train,
    Validation,
}

/// The last `markov_order` items of `history`, left-padded.
pub fn last_window(history: &[u32], markov_order: usize) -> Vec<u32> {
    let take = history.len().min(markov_order);
    let mut prev = vec![PADDING; markov_order - take];
    prev.extend_from_slice(&history[history.len() - take..]);
    prev
}

/// Sliding windows of `L + T` over each training sequence. A sequence too
/// short for a full window yields one left-padded instance whose targets are
/// its last `min(T, len - 1)` items. Validation instances take one target
/// window per validation position, with the training prefix as history.
pub fn generate_instances(
    split: &SplitDataset,
    markov_order: usize,
    targets: usize,
    part: InstancePart,
) -> Vec<TrainingInstance> {
    assert!(markov_order >= 1 && targets >= 1, "L and T must be >= 1");
    let mut out = Vec::new();
    for u in &split.users {
        match part {
            InstancePart::Train => windows_for(u.user, &u.train, markov_order, targets, &mut out),
            InstancePart::Validation => {
                let seq = u.train_and_validation();
                for start in u.train.len()..seq.len() {
                    let end = (start + targets).min(seq.len());
                    out.push(TrainingInstance {
                        user: u.user,
                        prev_items: last_window(&seq[..start], markov_order),
                        target_items: seq[start..end].to_vec(),
                    });
                }
            }
        }
    }
    out
}

fn windows_for(user: u32, seq: &[u32], l: usize, t: usize, out: &mut Vec<TrainingInstance>) {
    if seq.len() >= l + t {
        for start in 0..=seq.len() - l - t {
            out.push(TrainingInstance {
                user,
                prev_items: seq[start..start + l].to_vec(),
                target_items: seq[start + l..start + l + t].to_vec(),
            });
        }
    } else if seq.len() >= 2 {
        let n_targets = t.min(seq.len() - 1);
        let split_at = seq.len() - n_targets;
        out.push(TrainingInstance {
            user,
            prev_items: last_window(&seq[..split_at], l),
            target_items: seq[split_at..].to_vec(),
        });
    }
}

/// `count` negatives per target, drawn uniformly with replacement from
/// `1..=item_count` minus the instance's targets.
pub fn sample_negatives<R: Rng + ?Sized>(
    instance: &TrainingInstance,
    count: usize,
    item_count: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    sample_negatives_excluding(instance, count, item_count, &[], rng)
}

/// Like [`sample_negatives`], additionally excluding `extra` (for example the
/// user's whole training history).
pub fn sample_negatives_excluding<R: Rng + ?Sized>(
    instance: &TrainingInstance,
    count: usize,
    item_count: usize,
    extra: &[u32],
    rng: &mut R,
) -> Result<Vec<u32>> {
    let excluded: HashSet<u32> = instance
        .target_items
        .iter()
        .chain(extra)
        .copied()
        .filter(|&i| i != PADDING && (i as usize) <= item_count)
        .collect();
    if excluded.len() >= item_count {
        return Err(CaserError::Sampling(format!(
            "all {item_count} items are excluded for user {}",
            instance.user
        )));
    }
    let n = count * instance.target_items.len();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let cand = rng.random_range(1..=item_count as u32);
        if !excluded.contains(&cand) {
            out.push(cand);
        }
    }
    Ok(out)
}

const CACHE_MAGIC: &[u8; 5] = b"CSEQ1";

/// Binary instance cache: magic `CSEQ1`, then little-endian u32 fields
/// `L, T, user_count, item_count, n_instances`, then per instance
/// `user, prev[L], n_targets, targets[n_targets]`.
pub fn write_instance_cache<W: Write>(
    mut w: W,
    instances: &[TrainingInstance],
    markov_order: usize,
    targets: usize,
    user_count: usize,
    item_count: usize,
) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    for v in [markov_order, targets, user_count, item_count, instances.len()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for inst in instances {
        if inst.prev_items.len() != markov_order {
            return Err(CaserError::Contract(format!(
                "instance has {} previous items, expected {markov_order}",
                inst.prev_items.len()
            )));
        }
        w.write_all(&inst.user.to_le_bytes())?;
        for &i in &inst.prev_items {
            w.write_all(&i.to_le_bytes())?;
        }
        w.write_all(&(inst.target_items.len() as u32).to_le_bytes())?;
        for &i in &inst.target_items {
            w.write_all(&i.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceCache {
    pub markov_order: usize,
    pub targets: usize,
    pub user_count: usize,
    pub item_count: usize,
    pub instances: Vec<TrainingInstance>,
}

pub fn read_instance_cache<R: Read>(mut r: R) -> Result<InstanceCache> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < CACHE_MAGIC.len() || &buf[..CACHE_MAGIC.len()] != CACHE_MAGIC {
        return Err(CaserError::Format("missing CSEQ1 magic".into()));
    }
    let mut words = buf[CACHE_MAGIC.len()..].chunks(4);
    let mut next = || -> Result<u32> {
        match words.next() {
            Some(c) if c.len() == 4 => Ok(u32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            _ => Err(CaserError::Format("truncated instance cache".into())),
        }
    };
    let l = next()? as usize;
    let t = next()? as usize;
    let user_count = next()? as usize;
    let item_count = next()? as usize;
    let n = next()? as usize;
    let mut instances = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let user = next()?;
        let prev_items = (0..l).map(|_| next()).collect::<Result<Vec<_>>>()?;
        let nt = next()? as usize;
        if nt > t {
            return Err(CaserError::Format(format!("instance with {nt} targets exceeds T={t}")));
        }
        let target_items = (0..nt).map(|_| next()).collect::<Result<Vec<_>>>()?;
        instances.push(TrainingInstance {
            user,
            prev_items,
            target_items,
        });
    }
    if next().is_ok() {
        return Err(CaserError::Format("trailing bytes after instance cache".into()));
    }
    Ok(InstanceCache {
        markov_order: l,
        targets: t,
        user_count,
        item_count,
        instances,
    })
}
