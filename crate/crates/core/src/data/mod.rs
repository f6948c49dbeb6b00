//! Items, outfits, shoppers and datasets.
//!
//! Outfits refer to items by their index in the dataset's item table; the
//! string ids are kept for I/O and reporting.

mod io;
mod split;
mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, read_jsonl, write_dataset, write_jsonl, DatasetFiles};
pub use split::{split_dataset, SplitFractions, SplitReport};
pub use synth::{generate_synthetic, synthetic_shopper_cluster, SynthConfig};

pub const DEFAULT_MAX_OUTFIT_ITEMS: usize = 20;
pub const MIN_OUTFIT_ITEMS: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("no outfits")]
    NoOutfits,
    #[error("invalid dataset: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub category_id: String,
    pub image_embedding: Vec<f64>,
    pub title_embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    WeakNegative,
}

/// An unordered set of items. `items` holds indices into the dataset's
/// item table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outfit {
    pub outfit_id: String,
    pub shopper_id: String,
    pub items: Vec<usize>,
    pub label: Label,
    /// Position of the replaced item; set only for weak negatives.
    pub swapped_index: Option<usize>,
}

impl Outfit {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item: usize) -> bool {
        self.items.contains(&item)
    }
}

/// The outfits a shopper curated. Histories carry no order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShopperHistory {
    pub shopper_id: String,
    pub outfits: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Raw outfit record as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutfitRecord {
    pub outfit_id: String,
    pub shopper_id: String,
    pub item_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShopperRecord {
    pub shopper_id: String,
    pub outfit_ids: Vec<String>,
}

/// A fully cross-referenced dataset. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    item_index: HashMap<String, usize>,
    outfits: Vec<Outfit>,
    outfit_index: HashMap<String, usize>,
    shoppers: Vec<ShopperHistory>,
    shopper_index: HashMap<String, usize>,
    outfit_shopper: Vec<usize>,
    categories: Vec<String>,
    item_category: Vec<usize>,
    category_items: Vec<Vec<usize>>,
    splits: Vec<Split>,
    max_outfit_items: usize,
}

impl Dataset {
    /// Cross-references raw records, collecting every validation problem
    /// before failing.
    pub fn from_records(
        items: Vec<Item>,
        outfits: Vec<OutfitRecord>,
        shoppers: Vec<ShopperRecord>,
        max_outfit_items: usize,
    ) -> Result<Self, DataError> {
        if outfits.is_empty() {
            return Err(DataError::NoOutfits);
        }
        let mut issues = Vec::new();

        let mut item_index = HashMap::with_capacity(items.len());
        let (img_dim, txt_dim) = items.first().map_or((0, 0), |i| {
            (i.image_embedding.len(), i.title_embedding.len())
        });
        for (i, it) in items.iter().enumerate() {
            if item_index.insert(it.item_id.clone(), i).is_some() {
                issues.push(format!("duplicate item_id {}", it.item_id));
            }
            if it.image_embedding.len() != img_dim || it.title_embedding.len() != txt_dim {
                issues.push(format!(
                    "embedding length mismatch for item {}: image {} title {}, expected {} and {}",
                    it.item_id,
                    it.image_embedding.len(),
                    it.title_embedding.len(),
                    img_dim,
                    txt_dim
                ));
            }
        }

        let mut categories: Vec<String> = items.iter().map(|i| i.category_id.clone()).collect();
        categories.sort();
        categories.dedup();
        let cat_pos: HashMap<&str, usize> = categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let item_category: Vec<usize> = items
            .iter()
            .map(|i| cat_pos[i.category_id.as_str()])
            .collect();
        let mut category_items = vec![Vec::new(); categories.len()];
        for (i, &c) in item_category.iter().enumerate() {
            category_items[c].push(i);
        }

        let mut shopper_index = HashMap::with_capacity(shoppers.len());
        for (i, s) in shoppers.iter().enumerate() {
            if shopper_index.insert(s.shopper_id.clone(), i).is_some() {
                issues.push(format!("duplicate shopper_id {}", s.shopper_id));
            }
        }

        let mut outfit_index = HashMap::with_capacity(outfits.len());
        let mut resolved = Vec::with_capacity(outfits.len());
        let mut outfit_shopper = Vec::with_capacity(outfits.len());
        let mut dangling: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (o, rec) in outfits.iter().enumerate() {
            if outfit_index.insert(rec.outfit_id.clone(), o).is_some() {
                issues.push(format!("duplicate outfit_id {}", rec.outfit_id));
            }
            let n = rec.item_ids.len();
            if !(MIN_OUTFIT_ITEMS..=max_outfit_items).contains(&n) {
                issues.push(format!(
                    "outfit {} has {n} items, expected {MIN_OUTFIT_ITEMS}..={max_outfit_items}",
                    rec.outfit_id
                ));
            }
            let mut seen = HashSet::new();
            let mut idx = Vec::with_capacity(n);
            for id in &rec.item_ids {
                match item_index.get(id) {
                    Some(&i) => {
                        if !seen.insert(i) {
                            issues.push(format!("outfit {} lists item {id} twice", rec.outfit_id));
                        }
                        idx.push(i);
                    }
                    None => dangling
                        .entry(rec.outfit_id.clone())
                        .or_default()
                        .push(id.clone()),
                }
            }
            let shopper = match shopper_index.get(&rec.shopper_id) {
                Some(&s) => s,
                None => {
                    issues.push(format!(
                        "outfit {} belongs to unknown shopper {}",
                        rec.outfit_id, rec.shopper_id
                    ));
                    usize::MAX
                }
            };
            outfit_shopper.push(shopper);
            resolved.push(Outfit {
                outfit_id: rec.outfit_id.clone(),
                shopper_id: rec.shopper_id.clone(),
                items: idx,
                label: Label::Positive,
                swapped_index: None,
            });
        }
        if !dangling.is_empty() {
            let parts: Vec<String> = dangling
                .iter()
                .map(|(o, ids)| format!("{o} -> [{}]", ids.join(", ")))
                .collect();
            issues.push(format!(
                "unknown item references in outfits {}",
                parts.join(", ")
            ));
        }

        let mut histories = Vec::with_capacity(shoppers.len());
        let mut listed = vec![false; outfits.len()];
        for (si, s) in shoppers.iter().enumerate() {
            let mut ids = Vec::with_capacity(s.outfit_ids.len());
            for oid in &s.outfit_ids {
                match outfit_index.get(oid) {
                    Some(&o) => {
                        if outfit_shopper[o] != si {
                            issues.push(format!(
                                "shopper {} lists outfit {oid} owned by {}",
                                s.shopper_id, outfits[o].shopper_id
                            ));
                        }
                        if listed[o] {
                            issues.push(format!("outfit {oid} listed more than once"));
                        }
                        listed[o] = true;
                        ids.push(o);
                    }
                    None => issues.push(format!(
                        "shopper {} lists unknown outfit {oid}",
                        s.shopper_id
                    )),
                }
            }
            histories.push(ShopperHistory {
                shopper_id: s.shopper_id.clone(),
                outfits: ids,
            });
        }
        for (o, l) in listed.iter().enumerate() {
            if !l && outfit_shopper[o] != usize::MAX {
                issues.push(format!(
                    "outfit {} missing from shopper {}",
                    outfits[o].outfit_id, outfits[o].shopper_id
                ));
            }
        }

        if !issues.is_empty() {
            return Err(DataError::Invalid(issues));
        }
        let n_outfits = resolved.len();
        Ok(Dataset {
            items,
            item_index,
            outfits: resolved,
            outfit_index,
            shoppers: histories,
            shopper_index,
            outfit_shopper,
            categories,
            item_category,
            category_items,
            splits: vec![Split::Train; n_outfits],
            max_outfit_items,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &Item {
        &self.items[i]
    }

    pub fn item_by_id(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn outfits(&self) -> &[Outfit] {
        &self.outfits
    }

    pub fn outfit(&self, o: usize) -> &Outfit {
        &self.outfits[o]
    }

    pub fn outfit_by_id(&self, id: &str) -> Option<usize> {
        self.outfit_index.get(id).copied()
    }

    pub fn shoppers(&self) -> &[ShopperHistory] {
        &self.shoppers
    }

    pub fn shopper(&self, s: usize) -> &ShopperHistory {
        &self.shoppers[s]
    }

    pub fn shopper_by_id(&self, id: &str) -> Option<usize> {
        self.shopper_index.get(id).copied()
    }

    /// Index of the shopper who curated outfit `o`.
    pub fn owner(&self, o: usize) -> usize {
        self.outfit_shopper[o]
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_of(&self, item: usize) -> usize {
        self.item_category[item]
    }

    pub fn items_in_category(&self, category: usize) -> &[usize] {
        &self.category_items[category]
    }

    /// `category_id → item_ids`, sorted by category.
    pub fn category_index(&self) -> BTreeMap<&str, Vec<&str>> {
        self.categories
            .iter()
            .zip(&self.category_items)
            .map(|(c, items)| {
                (
                    c.as_str(),
                    items
                        .iter()
                        .map(|&i| self.items[i].item_id.as_str())
                        .collect(),
                )
            })
            .collect()
    }

    pub fn image_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.image_embedding.len())
    }

    pub fn title_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.title_embedding.len())
    }

    pub fn max_outfit_items(&self) -> usize {
        self.max_outfit_items
    }

    pub fn split_of(&self, o: usize) -> Split {
        self.splits[o]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Outfit indices in `split`, in dataset order.
    pub fn outfits_in(&self, split: Split) -> Vec<usize> {
        (0..self.outfits.len())
            .filter(|&o| self.splits[o] == split)
            .collect()
    }

    /// A shopper's outfits that fall in `split`.
    pub fn shopper_outfits_in(&self, shopper: usize, split: Split) -> Vec<usize> {
        self.shoppers[shopper]
            .outfits
            .iter()
            .copied()
            .filter(|&o| self.splits[o] == split)
            .collect()
    }

    pub(crate) fn with_splits(mut self, splits: Vec<Split>) -> Self {
        assert_eq!(splits.len(), self.outfits.len());
        self.splits = splits;
        self
    }

    pub fn item_ids_of(&self, outfit: &Outfit) -> Vec<&str> {
        outfit
            .items
            .iter()
            .map(|&i| self.items[i].item_id.as_str())
            .collect()
    }

    pub fn outfit_records(&self) -> Vec<OutfitRecord> {
        self.outfits
            .iter()
            .map(|o| OutfitRecord {
                outfit_id: o.outfit_id.clone(),
                shopper_id: o.shopper_id.clone(),
                item_ids: self
                    .item_ids_of(o)
                    .into_iter()
                    .map(str::to_string)
                    .collect(),
            })
            .collect()
    }

    pub fn shopper_records(&self) -> Vec<ShopperRecord> {
        self.shoppers
            .iter()
            .map(|s| ShopperRecord {
                shopper_id: s.shopper_id.clone(),
                outfit_ids: s
                    .outfits
                    .iter()
                    .map(|&o| self.outfits[o].outfit_id.clone())
                    .collect(),
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn item(id: &str, cat: &str, emb: Vec<f64>) -> Item {
        Item {
            item_id: id.into(),
            category_id: cat.into(),
            title_embedding: emb.iter().map(|v| -v).collect(),
            image_embedding: emb,
        }
    }

    pub fn outfit(id: &str, shopper: &str, items: &[&str]) -> OutfitRecord {
        OutfitRecord {
            outfit_id: id.into(),
            shopper_id: shopper.into(),
            item_ids: items.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn shopper(id: &str, outfits: &[&str]) -> ShopperRecord {
        ShopperRecord {
            shopper_id: id.into(),
            outfit_ids: outfits.iter().map(|s| s.to_string()).collect(),
        }
    }
}
