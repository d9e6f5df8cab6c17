//! Polyvore-style outfit catalog: ingestion, validation and split construction.
//!
//! The on-disk layout mirrors the published Polyvore distribution: one item
//! metadata document (`item_id -> {title, description, semantic_category, ...}`),
//! one JSON file per split listing outfits as `{set_id, items: [{item_id, index}]}`,
//! and optional official fill-in-the-blank files per split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest outfit that can form a compatibility question.
pub const MIN_OUTFIT_SIZE: usize = 2;

const MAX_LISTED_OFFENDERS: usize = 10;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path} at line {line}, column {column}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid record in {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("no items in {0}")]
    NoItems(PathBuf),
    #[error("{count} dangling item reference(s), first: {}", .first.join(", "))]
    DanglingReferences { count: usize, first: Vec<String> },
    #[error("invalid split ratios {0:?}: each must be positive and they must sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("catalog has no outfits")]
    EmptyCatalog,
}

pub type Result<T> = std::result::Result<T, CatalogError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Joint,
    Disjoint,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "joint" | "nondisjoint" => Ok(SplitMode::Joint),
            "disjoint" => Ok(SplitMode::Disjoint),
            other => Err(format!("unknown split mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub description: String,
    pub semantic_category: String,
    pub fine_category_id: Option<String>,
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outfit {
    pub outfit_id: String,
    pub item_ids: Vec<String>,
    pub source_split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub mode: SplitMode,
}

impl SplitAssignment {
    pub fn get(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut BTreeSet<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn split_of(&self, outfit_id: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|s| self.get(*s).contains(outfit_id))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One entry of an official fill-in-the-blank file, with item references
/// already resolved to item ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfficialFitb {
    pub question: Vec<String>,
    pub answers: Vec<String>,
    pub blank_position: i64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Catalog {
    pub items: BTreeMap<String, Item>,
    pub outfits: Vec<Outfit>,
    pub splits: SplitAssignment,
    #[serde(default)]
    pub official_fitb: BTreeMap<Split, Vec<OfficialFitb>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CatalogStats {
    pub items: usize,
    pub outfits: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Catalog {
    /// Builds a catalog from in-memory parts, enforcing the same invariants as
    /// [`load_catalog`].
    pub fn new(items: Vec<Item>, outfits: Vec<Outfit>, splits: SplitAssignment) -> Result<Self> {
        let origin = PathBuf::from("<memory>");
        let mut map = BTreeMap::new();
        for item in items {
            validate_item(&item, &origin)?;
            if map.insert(item.item_id.clone(), item).is_some() {
                return Err(CatalogError::Invalid {
                    path: origin,
                    message: "duplicate item_id".into(),
                });
            }
        }
        if map.is_empty() {
            return Err(CatalogError::NoItems(origin));
        }
        let mut seen = BTreeSet::new();
        for outfit in &outfits {
            validate_outfit_shape(outfit, &origin)?;
            if !seen.insert(outfit.outfit_id.as_str()) {
                return Err(CatalogError::Invalid {
                    path: origin,
                    message: format!("duplicate outfit_id {}", outfit.outfit_id),
                });
            }
        }
        check_references(&map, &outfits)?;
        Ok(Catalog {
            items: map,
            outfits,
            splits,
            official_fitb: BTreeMap::new(),
        })
    }

    pub fn item(&self, item_id: &str) -> Option<&Item> {
        self.items.get(item_id)
    }

    pub fn outfit(&self, outfit_id: &str) -> Option<&Outfit> {
        self.outfits.iter().find(|o| o.outfit_id == outfit_id)
    }

    /// Outfits assigned to `split`, in catalog order.
    pub fn split_outfits(&self, split: Split) -> Vec<&Outfit> {
        let ids = self.splits.get(split);
        self.outfits
            .iter()
            .filter(|o| ids.contains(&o.outfit_id))
            .collect()
    }

    pub fn stats(&self) -> CatalogStats {
        CatalogStats {
            items: self.items.len(),
            outfits: self.outfits.len(),
            train: self.splits.train.len(),
            valid: self.splits.valid.len(),
            test: self.splits.test.len(),
        }
    }

    pub fn with_splits(mut self, splits: SplitAssignment) -> Self {
        self.splits = splits;
        self
    }
}

/// File names of a Polyvore-style distribution relative to a root directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestLayout {
    pub metadata_file: String,
    /// Sub-directory holding split and FITB files (`disjoint`, `nondisjoint`, or empty).
    pub split_dir: String,
    pub split_files: BTreeMap<Split, String>,
    pub fitb_files: BTreeMap<Split, String>,
    pub mode: SplitMode,
}

impl IngestLayout {
    /// Flat layout: metadata, `train.json`, `valid.json`, `test.json` and
    /// `fill_in_blank_<split>.json` side by side in the root.
    pub fn flat(mode: SplitMode) -> Self {
        let split_files = Split::ALL
            .into_iter()
            .map(|s| (s, format!("{s}.json")))
            .collect();
        let fitb_files = Split::ALL
            .into_iter()
            .map(|s| (s, format!("fill_in_blank_{s}.json")))
            .collect();
        IngestLayout {
            metadata_file: "polyvore_item_metadata.json".into(),
            split_dir: String::new(),
            split_files,
            fitb_files,
            mode,
        }
    }

    /// The published layout: metadata at the root, splits under `disjoint/`
    /// or `nondisjoint/`.
    pub fn polyvore(mode: SplitMode) -> Self {
        let mut layout = Self::flat(mode);
        layout.split_dir = match mode {
            SplitMode::Joint => "nondisjoint".into(),
            SplitMode::Disjoint => "disjoint".into(),
        };
        layout
    }

    /// Picks [`IngestLayout::polyvore`] when the mode sub-directory exists,
    /// otherwise the flat layout.
    pub fn detect(root: &Path, mode: SplitMode) -> Self {
        let nested = Self::polyvore(mode);
        if root.join(&nested.split_dir).is_dir() {
            nested
        } else {
            Self::flat(mode)
        }
    }

    fn split_root(&self, root: &Path) -> PathBuf {
        if self.split_dir.is_empty() {
            root.to_path_buf()
        } else {
            root.join(&self.split_dir)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
struct RawItem {
    #[serde(default)]
    title: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    semantic_category: String,
    #[serde(default, deserialize_with = "de_opt_stringish")]
    category_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    url_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_ref: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawOutfit {
    #[serde(deserialize_with = "de_stringish")]
    set_id: String,
    items: Vec<RawOutfitItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawOutfitItem {
    #[serde(deserialize_with = "de_stringish")]
    item_id: String,
    index: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawFitb {
    question: Vec<String>,
    answers: Vec<String>,
    blank_position: i64,
}

// Polyvore ids appear both as JSON strings and numbers depending on the release.
fn de_stringish<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "expected string or number, got {other}"
        ))),
    }
}

fn de_opt_stringish<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Option<String>, D::Error> {
    match Option::<serde_json::Value>::deserialize(d)? {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(serde_json::Value::String(s)) => Ok(Some(s)),
        Some(serde_json::Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(serde::de::Error::custom(format!(
            "expected string or number, got {other}"
        ))),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(CatalogError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CatalogError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn validate_item(item: &Item, path: &Path) -> Result<()> {
    if item.item_id.trim().is_empty() {
        return Err(CatalogError::Invalid {
            path: path.to_path_buf(),
            message: "empty item_id".into(),
        });
    }
    if item.semantic_category.trim().is_empty() {
        return Err(CatalogError::Invalid {
            path: path.to_path_buf(),
            message: format!("item {} has no semantic_category", item.item_id),
        });
    }
    Ok(())
}

fn validate_outfit_shape(outfit: &Outfit, path: &Path) -> Result<()> {
    if outfit.item_ids.len() < MIN_OUTFIT_SIZE {
        return Err(CatalogError::Invalid {
            path: path.to_path_buf(),
            message: format!(
                "outfit {} has {} item(s); at least {MIN_OUTFIT_SIZE} required",
                outfit.outfit_id,
                outfit.item_ids.len()
            ),
        });
    }
    let unique: BTreeSet<&String> = outfit.item_ids.iter().collect();
    if unique.len() != outfit.item_ids.len() {
        return Err(CatalogError::Invalid {
            path: path.to_path_buf(),
            message: format!("outfit {} repeats an item", outfit.outfit_id),
        });
    }
    Ok(())
}

fn check_references(items: &BTreeMap<String, Item>, outfits: &[Outfit]) -> Result<()> {
    let mut offenders = Vec::new();
    let mut count = 0;
    for outfit in outfits {
        for id in &outfit.item_ids {
            if !items.contains_key(id) {
                count += 1;
                if offenders.len() < MAX_LISTED_OFFENDERS && !offenders.contains(id) {
                    offenders.push(id.clone());
                }
            }
        }
    }
    if count > 0 {
        return Err(CatalogError::DanglingReferences {
            count,
            first: offenders,
        });
    }
    Ok(())
}

/// Loads and validates a catalog from `root` using `layout`.
///
/// Split files that are absent are treated as empty splits, but at least one
/// must exist. FITB files are optional.
pub fn load_catalog(root: &Path, layout: &IngestLayout) -> Result<Catalog> {
    let meta_path = root.join(&layout.metadata_file);
    let raw_items: BTreeMap<String, RawItem> = read_json(&meta_path)?;
    if raw_items.is_empty() {
        return Err(CatalogError::NoItems(meta_path));
    }
    let mut items = BTreeMap::new();
    for (item_id, raw) in raw_items {
        let title = if raw.title.trim().is_empty() {
            raw.url_name.clone().unwrap_or_default()
        } else {
            raw.title
        };
        let item = Item {
            item_id: item_id.clone(),
            title,
            description: raw.description,
            semantic_category: raw.semantic_category,
            fine_category_id: raw.category_id,
            image_ref: raw.image_ref,
        };
        validate_item(&item, &meta_path)?;
        items.insert(item_id, item);
    }

    let split_root = layout.split_root(root);
    let mut outfits = Vec::new();
    let mut splits = SplitAssignment {
        mode: layout.mode,
        ..Default::default()
    };
    let mut found_any = false;
    let mut seen_ids = BTreeSet::new();
    // Keyed per split: set_id -> item ids ordered by `index`, for FITB ref resolution.
    let mut by_set: HashMap<String, BTreeMap<i64, String>> = HashMap::new();
    for (split, file) in &layout.split_files {
        let path = split_root.join(file);
        if !path.is_file() {
            continue;
        }
        found_any = true;
        let raw: Vec<RawOutfit> = read_json(&path)?;
        for ro in raw {
            if !seen_ids.insert(ro.set_id.clone()) {
                return Err(CatalogError::Invalid {
                    path: path.clone(),
                    message: format!("outfit {} appears more than once", ro.set_id),
                });
            }
            let mut entries = ro.items;
            entries.sort_by_key(|e| e.index);
            let outfit = Outfit {
                outfit_id: ro.set_id.clone(),
                item_ids: entries.iter().map(|e| e.item_id.clone()).collect(),
                source_split: Some(*split),
            };
            validate_outfit_shape(&outfit, &path)?;
            by_set.insert(
                ro.set_id.clone(),
                entries.into_iter().map(|e| (e.index, e.item_id)).collect(),
            );
            splits.get_mut(*split).insert(outfit.outfit_id.clone());
            outfits.push(outfit);
        }
    }
    if !found_any {
        let first = layout
            .split_files
            .values()
            .next()
            .map(|f| split_root.join(f))
            .unwrap_or(split_root);
        return Err(CatalogError::MissingFile(first));
    }
    check_references(&items, &outfits)?;

    let mut official_fitb = BTreeMap::new();
    for (split, file) in &layout.fitb_files {
        let path = split_root.join(file);
        if !path.is_file() {
            continue;
        }
        let raw: Vec<RawFitb> = read_json(&path)?;
        let resolve = |r: &str| resolve_item_ref(r, &items, &by_set);
        let mut entries = Vec::with_capacity(raw.len());
        for (n, q) in raw.into_iter().enumerate() {
            let question = q.question.iter().map(|r| resolve(r)).collect::<Option<Vec<_>>>();
            let answers = q.answers.iter().map(|r| resolve(r)).collect::<Option<Vec<_>>>();
            match (question, answers) {
                (Some(question), Some(answers)) if !answers.is_empty() => {
                    entries.push(OfficialFitb {
                        question,
                        answers,
                        blank_position: q.blank_position,
                    })
                }
                _ => {
                    return Err(CatalogError::Invalid {
                        path: path.clone(),
                        message: format!("entry {n} has unresolvable item references"),
                    })
                }
            }
        }
        official_fitb.insert(*split, entries);
    }

    let catalog = Catalog {
        items,
        outfits,
        splits,
        official_fitb,
    };
    let stats = catalog.stats();
    log::info!(
        "loaded catalog: {} items, {} outfits (train {}, valid {}, test {})",
        stats.items,
        stats.outfits,
        stats.train,
        stats.valid,
        stats.test
    );
    Ok(catalog)
}

/// Resolves either a plain item id or a Polyvore `<set_id>_<index>` reference.
fn resolve_item_ref(
    r: &str,
    items: &BTreeMap<String, Item>,
    by_set: &HashMap<String, BTreeMap<i64, String>>,
) -> Option<String> {
    if items.contains_key(r) {
        return Some(r.to_string());
    }
    let (set_id, index) = r.rsplit_once('_')?;
    let index: i64 = index.parse().ok()?;
    by_set.get(set_id)?.get(&index).cloned()
}

/// Writes `catalog` in the flat native layout under `root`. Loading the result
/// with `IngestLayout::flat(catalog.splits.mode)` reproduces the catalog.
///
/// Outfits not assigned to any split are not written.
pub fn write_catalog(catalog: &Catalog, root: &Path) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CatalogError::Io { path, source }
    };
    fs::create_dir_all(root).map_err(io(root))?;
    let layout = IngestLayout::flat(catalog.splits.mode);

    let raw_items: BTreeMap<&str, RawItem> = catalog
        .items
        .values()
        .map(|it| {
            (
                it.item_id.as_str(),
                RawItem {
                    title: it.title.clone(),
                    description: it.description.clone(),
                    semantic_category: it.semantic_category.clone(),
                    category_id: it.fine_category_id.clone(),
                    url_name: None,
                    image_ref: it.image_ref.clone(),
                },
            )
        })
        .collect();
    let meta = root.join(&layout.metadata_file);
    fs::write(&meta, to_json(&raw_items)).map_err(io(&meta))?;

    for split in Split::ALL {
        let raw: Vec<RawOutfit> = catalog
            .split_outfits(split)
            .into_iter()
            .map(|o| RawOutfit {
                set_id: o.outfit_id.clone(),
                items: o
                    .item_ids
                    .iter()
                    .enumerate()
                    .map(|(i, id)| RawOutfitItem {
                        item_id: id.clone(),
                        index: i as i64 + 1,
                    })
                    .collect(),
            })
            .collect();
        let path = root.join(&layout.split_files[&split]);
        fs::write(&path, to_json(&raw)).map_err(io(&path))?;
    }
    for (split, entries) in &catalog.official_fitb {
        let raw: Vec<RawFitb> = entries
            .iter()
            .map(|e| RawFitb {
                question: e.question.clone(),
                answers: e.answers.clone(),
                blank_position: e.blank_position,
            })
            .collect();
        let path = root.join(&layout.fitb_files[split]);
        fs::write(&path, to_json(&raw)).map_err(io(&path))?;
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("catalog records serialize")
}

/// Result of [`build_disjoint_splits`]: the assignment plus the outfits that
/// had to be dropped to keep item sets disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DisjointSplit {
    pub assignment: SplitAssignment,
    pub dropped: Vec<String>,
}

/// Greedily assigns outfits to train/valid/test so that no item is shared
/// between splits.
///
/// Outfits are visited in seeded-shuffled order. Each one tries the splits in
/// order of largest ratio deficit and joins the first whose item set does not
/// collide with the items already held by the other two splits; if every
/// split collides it is dropped.
pub fn build_disjoint_splits(
    catalog: &Catalog,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DisjointSplit> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(CatalogError::InvalidRatios(ratios));
    }
    if catalog.outfits.is_empty() {
        return Err(CatalogError::EmptyCatalog);
    }

    let mut order: Vec<usize> = (0..catalog.outfits.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut assignment = SplitAssignment {
        mode: SplitMode::Disjoint,
        ..Default::default()
    };
    let mut owner: HashMap<&str, usize> = HashMap::new();
    let mut counts = [0usize; 3];
    let mut dropped = Vec::new();

    for idx in order {
        let outfit = &catalog.outfits[idx];
        let assigned: usize = counts.iter().sum();
        let mut candidates = [0usize, 1, 2];
        let deficit = |s: usize| ratios[s] * (assigned + 1) as f64 - counts[s] as f64;
        candidates.sort_by(|&a, &b| deficit(b).total_cmp(&deficit(a)).then(a.cmp(&b)));

        let chosen = candidates.into_iter().find(|&s| {
            outfit
                .item_ids
                .iter()
                .all(|id| owner.get(id.as_str()).is_none_or(|&o| o == s))
        });
        match chosen {
            Some(s) => {
                for id in &outfit.item_ids {
                    owner.insert(id.as_str(), s);
                }
                counts[s] += 1;
                assignment
                    .get_mut(Split::ALL[s])
                    .insert(outfit.outfit_id.clone());
            }
            None => dropped.push(outfit.outfit_id.clone()),
        }
    }
    dropped.sort();
    log::info!(
        "disjoint split: train {}, valid {}, test {}, dropped {}",
        counts[0],
        counts[1],
        counts[2],
        dropped.len()
    );
    Ok(DisjointSplit {
        assignment,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisjointnessReport {
    pub mode: SplitMode,
    /// Item ids used by outfits of two or more splits, sorted.
    pub violations: Vec<String>,
    /// Outfit ids listed in more than one split, sorted.
    pub overlapping_outfits: Vec<String>,
    /// Split entries that name no outfit of the catalog, sorted.
    pub unknown_outfits: Vec<String>,
    /// Set for joint-mode splits, where shared items are expected.
    pub informational: bool,
}

impl DisjointnessReport {
    pub fn is_disjoint(&self) -> bool {
        self.violations.is_empty() && self.overlapping_outfits.is_empty()
    }
}

pub fn verify_disjoint(catalog: &Catalog, splits: &SplitAssignment) -> DisjointnessReport {
    let outfits: HashMap<&str, &Outfit> = catalog
        .outfits
        .iter()
        .map(|o| (o.outfit_id.as_str(), o))
        .collect();
    let mut item_splits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut outfit_splits: BTreeMap<&str, usize> = BTreeMap::new();
    let mut unknown = BTreeSet::new();
    for split in Split::ALL {
        for id in splits.get(split) {
            *outfit_splits.entry(id.as_str()).or_default() += 1;
            match outfits.get(id.as_str()) {
                Some(outfit) => {
                    for item in &outfit.item_ids {
                        item_splits.entry(item.as_str()).or_default().insert(split);
                    }
                }
                None => {
                    unknown.insert(id.clone());
                }
            }
        }
    }
    DisjointnessReport {
        mode: splits.mode,
        violations: item_splits
            .into_iter()
            .filter(|(_, s)| s.len() >= 2)
            .map(|(id, _)| id.to_string())
            .collect(),
        overlapping_outfits: outfit_splits
            .into_iter()
            .filter(|(_, n)| *n >= 2)
            .map(|(id, _)| id.to_string())
            .collect(),
        unknown_outfits: unknown.into_iter().collect(),
        informational: splits.mode == SplitMode::Joint,
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical text of an item, used for embedding and prompt rendering:
/// `"<title>. <description>. category: <semantic_category>."` with whitespace
/// collapsed and empty parts skipped. Returns an empty string only when every
/// part is empty.
pub fn item_text(item: &Item) -> String {
    let category = normalize_ws(&item.semantic_category);
    let parts = [
        normalize_ws(&item.title),
        normalize_ws(&item.description),
        if category.is_empty() {
            String::new()
        } else {
            format!("category: {category}")
        },
    ];
    parts
        .iter()
        .map(|p| p.trim_end_matches('.').trim_end())
        .filter(|p| !p.is_empty())
        .map(|p| format!("{p}."))
        .collect::<Vec<_>>()
        .join(" ")
}
