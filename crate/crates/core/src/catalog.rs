//! Purchase-log ingestion: tab-separated interaction and item files, activity
//! filtering, per-user chronological sequences with a leave-one-out split, price
//! buckets and cold-start labels.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DirError, Result};

/// Users with fewer purchases than this are dropped at ingestion.
pub const MIN_PURCHASES: usize = 5;
/// Users with more purchases than this are dropped at ingestion.
pub const MAX_PURCHASES: usize = 100;
/// Items seen fewer than this many times in the train split count as cold-start.
pub const COLD_START_THRESHOLD: u32 = 5;

const CATALOG_FORMAT_VERSION: u32 = 1;

/// One parsed interaction line, before ids are interned.
#[derive(Debug, Clone)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CatalogItem {
    pub id: String,
    /// Root-to-leaf category path. Never empty.
    pub category_path: Vec<String>,
    pub price: Option<f64>,
}

impl CatalogItem {
    pub fn category_label(&self) -> String {
        self.category_path.join("/")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct SeqEvent {
    pub item: u32,
    pub timestamp: i64,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Keep only this many users, sampled uniformly before filtering.
    pub sample_users: Option<usize>,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            sample_users: None,
            seed: 0,
        }
    }
}

/// Filtered interaction log. Each retained user has 5..=100 purchases sorted by
/// timestamp; the last one is the test event and the second-to-last the
/// validation event, everything before them is train.
#[derive(Debug, Clone)]
pub struct Catalog {
    users: Vec<String>,
    items: Vec<CatalogItem>,
    sequences: Vec<Vec<SeqEvent>>,
    index: CatalogIndex,
}

#[derive(Debug, Clone, Default)]
struct CatalogIndex {
    /// Train-split users per item, one entry per event (repeat buyers repeat).
    train_users_of_item: Vec<Vec<u32>>,
    /// All items each user touched in any split.
    purchased: Vec<HashSet<u32>>,
}

#[derive(Serialize, Deserialize)]
struct CatalogFile {
    catalog_format_version: u32,
    users: Vec<String>,
    items: Vec<CatalogItem>,
    sequences: Vec<Vec<SeqEvent>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ColdStartLabel {
    pub item: u32,
    pub train_frequency: u32,
    pub is_cold: bool,
}

/// Table-style counts plus the share of test events whose item is cold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogSummary {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub feedback: usize,
    pub cold_start_fraction: f64,
}

pub fn ingest<P: AsRef<Path>, Q: AsRef<Path>>(
    interactions_path: P,
    items_path: Q,
    options: &IngestOptions,
) -> Result<Catalog> {
    let items = parse_item_file(items_path.as_ref())?;
    let raw = parse_interaction_file(interactions_path.as_ref(), &items)?;
    Catalog::from_parts(items, raw, options)
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DirError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_item_file(path: &Path) -> Result<Vec<CatalogItem>> {
    let text = read_file(path)?;
    let path_str = path.display().to_string();
    let mut seen: HashSet<String> = HashSet::new();
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let malformed = |message: String| DirError::Malformed {
            path: path_str.clone(),
            line: lineno,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(malformed("empty item id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(malformed(format!("duplicate item id `{id}`")));
        }
        let category_path: Vec<String> = fields[1].split('/').map(|s| s.trim().to_string()).collect();
        if category_path.iter().any(|s| s.is_empty()) {
            return Err(malformed("empty category path segment".into()));
        }
        let price_field = fields[2].trim();
        let price = if price_field == "NA" {
            None
        } else {
            let p: f64 = price_field
                .parse()
                .map_err(|_| malformed(format!("unparseable price `{price_field}`")))?;
            if p < 0.0 {
                return Err(malformed(format!("negative price {p}")));
            }
            Some(p)
        };
        items.push(CatalogItem {
            id: id.to_string(),
            category_path,
            price,
        });
    }
    Ok(items)
}

fn parse_interaction_file(path: &Path, items: &[CatalogItem]) -> Result<Vec<RawInteraction>> {
    let text = read_file(path)?;
    let path_str = path.display().to_string();
    let known: HashSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let mut raw = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let malformed = |message: String| DirError::Malformed {
            path: path_str.clone(),
            line: lineno,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let user = fields[0].trim();
        let item = fields[1].trim();
        if user.is_empty() || item.is_empty() {
            return Err(malformed("empty user or item id".into()));
        }
        if !known.contains(item) {
            return Err(DirError::UnknownItem {
                path: path_str.clone(),
                line: lineno,
                item: item.to_string(),
            });
        }
        let timestamp: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| malformed(format!("unparseable timestamp `{}`", fields[2])))?;
        raw.push(RawInteraction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Ok(raw)
}

impl Catalog {
    /// Builds a catalog from already-parsed records: dedups (user, item,
    /// timestamp) triples, optionally subsamples users, drops users outside
    /// 5..=100 purchases and items left without interactions, then splits.
    pub fn from_parts(
        item_records: Vec<CatalogItem>,
        raw: Vec<RawInteraction>,
        options: &IngestOptions,
    ) -> Result<Catalog> {
        let record_index: HashMap<&str, usize> = item_records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        for r in &raw {
            if !record_index.contains_key(r.item.as_str()) {
                return Err(DirError::Invalid(format!(
                    "interaction references unknown item `{}`",
                    r.item
                )));
            }
        }

        // Dedup exact repeats, keeping first occurrence.
        let mut seen: HashSet<(String, String, i64)> = HashSet::new();
        let mut dropped = 0usize;
        let mut raw: Vec<RawInteraction> = raw
            .into_iter()
            .filter(|r| {
                let fresh = seen.insert((r.user.clone(), r.item.clone(), r.timestamp));
                if !fresh {
                    dropped += 1;
                }
                fresh
            })
            .collect();
        if dropped > 0 {
            log::warn!("dropped {dropped} duplicate interactions");
        }

        // Subsampling happens before activity filtering.
        if let Some(limit) = options.sample_users {
            let mut order: Vec<&str> = Vec::new();
            let mut distinct: HashSet<&str> = HashSet::new();
            for r in &raw {
                if distinct.insert(r.user.as_str()) {
                    order.push(r.user.as_str());
                }
            }
            if limit < order.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
                let mut picks = rand::seq::index::sample(&mut rng, order.len(), limit).into_vec();
                picks.sort_unstable();
                let keep: HashSet<String> =
                    picks.into_iter().map(|i| order[i].to_string()).collect();
                raw.retain(|r| keep.contains(&r.user));
            }
        }

        // One pass suffices: removing a user never changes another user's count,
        // and unpurchased items are dropped afterwards.
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &raw {
            *counts.entry(r.user.as_str()).or_insert(0) += 1;
        }
        let active: HashSet<&str> = counts
            .iter()
            .filter(|(_, &c)| (MIN_PURCHASES..=MAX_PURCHASES).contains(&c))
            .map(|(&u, _)| u)
            .collect();

        let mut users: Vec<String> = Vec::new();
        let mut user_index: HashMap<String, u32> = HashMap::new();
        let mut items: Vec<CatalogItem> = Vec::new();
        let mut item_index: HashMap<String, u32> = HashMap::new();
        let mut sequences: Vec<Vec<SeqEvent>> = Vec::new();
        for r in &raw {
            if !active.contains(r.user.as_str()) {
                continue;
            }
            let u = *user_index.entry(r.user.clone()).or_insert_with(|| {
                users.push(r.user.clone());
                sequences.push(Vec::new());
                (users.len() - 1) as u32
            });
            let q = *item_index.entry(r.item.clone()).or_insert_with(|| {
                items.push(item_records[record_index[r.item.as_str()]].clone());
                (items.len() - 1) as u32
            });
            sequences[u as usize].push(SeqEvent {
                item: q,
                timestamp: r.timestamp,
            });
        }
        // Stable sort: ties keep input order.
        for seq in &mut sequences {
            seq.sort_by_key(|e| e.timestamp);
        }

        let mut catalog = Catalog {
            users,
            items,
            sequences,
            index: CatalogIndex::default(),
        };
        catalog.rebuild_index();
        Ok(catalog)
    }

    fn rebuild_index(&mut self) {
        let mut train_users_of_item = vec![Vec::new(); self.items.len()];
        let mut purchased = vec![HashSet::new(); self.users.len()];
        for (u, seq) in self.sequences.iter().enumerate() {
            debug_assert!(seq.len() >= 3);
            for e in &seq[..seq.len() - 2] {
                train_users_of_item[e.item as usize].push(u as u32);
            }
            for e in seq {
                purchased[u].insert(e.item);
            }
        }
        self.index = CatalogIndex {
            train_users_of_item,
            purchased,
        };
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn user_id(&self, user: u32) -> &str {
        &self.users[user as usize]
    }

    pub fn find_user(&self, id: &str) -> Result<u32> {
        self.users
            .iter()
            .position(|u| u == id)
            .map(|i| i as u32)
            .ok_or_else(|| DirError::UnknownUser(id.to_string()))
    }

    pub fn item(&self, item: u32) -> &CatalogItem {
        &self.items[item as usize]
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    /// Full chronological sequence including the validation and test events.
    pub fn sequence(&self, user: u32) -> &[SeqEvent] {
        &self.sequences[user as usize]
    }

    pub fn train_sequence(&self, user: u32) -> &[SeqEvent] {
        let seq = &self.sequences[user as usize];
        &seq[..seq.len() - 2]
    }

    pub fn validation_event(&self, user: u32) -> SeqEvent {
        let seq = &self.sequences[user as usize];
        seq[seq.len() - 2]
    }

    pub fn test_event(&self, user: u32) -> SeqEvent {
        let seq = &self.sequences[user as usize];
        seq[seq.len() - 1]
    }

    /// All train events as (user, item) pairs, user-major in event order.
    pub fn train_pairs(&self) -> Vec<(u32, u32)> {
        let mut pairs = Vec::new();
        for u in 0..self.users.len() as u32 {
            for e in self.train_sequence(u) {
                pairs.push((u, e.item));
            }
        }
        pairs
    }

    pub fn train_interaction_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 2).sum()
    }

    /// Train-split buyers of an item, one entry per event.
    pub fn train_users_of(&self, item: u32) -> &[u32] {
        &self.index.train_users_of_item[item as usize]
    }

    pub fn train_frequency(&self, item: u32) -> u32 {
        self.index.train_users_of_item[item as usize].len() as u32
    }

    /// Items the user touched in any split.
    pub fn purchased(&self, user: u32) -> &HashSet<u32> {
        &self.index.purchased[user as usize]
    }

    pub fn summary(&self) -> CatalogSummary {
        let categories: HashSet<String> =
            self.items.iter().map(|i| i.category_label()).collect();
        let labels = label_cold_start(self);
        let cold_tests = (0..self.users.len() as u32)
            .filter(|&u| labels[self.test_event(u).item as usize].is_cold)
            .count();
        CatalogSummary {
            users: self.users.len(),
            items: self.items.len(),
            categories: categories.len(),
            feedback: self.interaction_count(),
            cold_start_fraction: if self.users.is_empty() {
                0.0
            } else {
                cold_tests as f64 / self.users.len() as f64
            },
        }
    }

    /// Stable content hash over ids and events, used to pair checkpoints with
    /// the catalog they were trained on.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for u in &self.users {
            h.write(u.as_bytes());
            h.write(&[0xff]);
        }
        for i in &self.items {
            h.write(i.id.as_bytes());
            h.write(&[0xfe]);
            h.write(i.category_label().as_bytes());
            h.write(&[0xfd]);
        }
        for seq in &self.sequences {
            for e in seq {
                h.write(&e.item.to_le_bytes());
                h.write(&e.timestamp.to_le_bytes());
            }
            h.write(&[0xfc]);
        }
        h.finish()
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = CatalogFile {
            catalog_format_version: CATALOG_FORMAT_VERSION,
            users: self.users.clone(),
            items: self.items.clone(),
            sequences: self.sequences.clone(),
        };
        let bytes = serde_json::to_vec(&file)
            .map_err(|e| DirError::Invalid(format!("catalog serialization failed: {e}")))?;
        fs::write(path.as_ref(), bytes).map_err(|source| DirError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        })
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Catalog> {
        let text = read_file(path.as_ref())?;
        let file: CatalogFile = serde_json::from_str(&text).map_err(|e| {
            DirError::Invalid(format!("{}: not a catalog file: {e}", path.as_ref().display()))
        })?;
        if file.catalog_format_version != CATALOG_FORMAT_VERSION {
            return Err(DirError::Invalid(format!(
                "catalog format version {} not supported (expected {})",
                file.catalog_format_version, CATALOG_FORMAT_VERSION
            )));
        }
        let mut catalog = Catalog {
            users: file.users,
            items: file.items,
            sequences: file.sequences,
            index: CatalogIndex::default(),
        };
        catalog.rebuild_index();
        Ok(catalog)
    }
}

/// Cold-start labels from train-split frequencies only.
pub fn label_cold_start(catalog: &Catalog) -> Vec<ColdStartLabel> {
    (0..catalog.item_count() as u32)
        .map(|item| {
            let train_frequency = catalog.train_frequency(item);
            ColdStartLabel {
                item,
                train_frequency,
                is_cold: train_frequency < COLD_START_THRESHOLD,
            }
        })
        .collect()
}

/// Compresses heavy tails: identity up to 5, then 5*log5(x). Continuous and
/// strictly increasing.
pub fn transform_price(x: f64) -> f64 {
    if x <= 5.0 {
        x
    } else {
        5.0 * x.ln() / 5f64.ln()
    }
}

/// Transformed-price range over items with at least one train event and a
/// known price. None when no such item exists.
pub fn price_transform_range(catalog: &Catalog) -> Option<(f64, f64)> {
    let mut range: Option<(f64, f64)> = None;
    for item in 0..catalog.item_count() as u32 {
        if catalog.train_frequency(item) == 0 {
            continue;
        }
        if let Some(p) = catalog.item(item).price {
            let t = transform_price(p);
            range = Some(match range {
                None => (t, t),
                Some((lo, hi)) => (lo.min(t), hi.max(t)),
            });
        }
    }
    range
}

/// Maps a price to one of buckets 0..=4 over the transformed training range,
/// clamping out-of-range values; missing prices get the extra bucket 5.
pub fn bucket_price(price: Option<f64>, range: (f64, f64)) -> Result<u32> {
    let (t_min, t_max) = range;
    let price = match price {
        None => return Ok(5),
        Some(p) => p,
    };
    if price < 0.0 {
        return Err(DirError::NegativePrice(price));
    }
    if !(t_min < t_max) {
        return Err(DirError::Invalid(format!(
            "degenerate price range [{t_min}, {t_max}]"
        )));
    }
    let t = transform_price(price);
    let b = (5.0 * (t - t_min) / (t_max - t_min)).floor();
    Ok(b.clamp(0.0, 4.0) as u32)
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}
