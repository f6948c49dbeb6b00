//! Negatives, weak negatives, CP-Hard pairs, FITB questions, histories and
//! training batches.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use log::{debug, warn};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, write_jsonl, DataError, Dataset, Label, Outfit, Split};
use crate::rng::{indexed_substream, keyed_hash, substream, Rng};

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("outfit {0} has no position with a same-category alternative")]
    NoSwappablePosition(String),
    #[error("cannot draw {needed} distractors for outfit {outfit}: only {available} candidates")]
    TooFewCandidates {
        outfit: String,
        needed: usize,
        available: usize,
    },
    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A full-random negative together with the positions that could not be
/// replaced (their category had no usable alternative).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RandomNegative {
    pub outfit: Outfit,
    pub kept_positions: Vec<usize>,
}

/// Replaces every item with a different, uniformly drawn item of the same
/// category. Replacements never duplicate an item already placed.
pub fn make_random_negative(outfit: &Outfit, ds: &Dataset, rng: &mut Rng) -> RandomNegative {
    let mut items: Vec<usize> = Vec::with_capacity(outfit.len());
    let mut kept = Vec::new();
    for (pos, &orig) in outfit.items.iter().enumerate() {
        let cands: Vec<usize> = ds
            .items_in_category(ds.category_of(orig))
            .iter()
            .copied()
            .filter(|&c| c != orig && !items.contains(&c))
            .collect();
        if cands.is_empty() {
            kept.push(pos);
            items.push(orig);
        } else {
            items.push(cands[rng.gen_range(0..cands.len())]);
        }
    }
    if !kept.is_empty() {
        debug!(
            "negative of {} kept {} position(s) without alternatives",
            outfit.outfit_id,
            kept.len()
        );
    }
    RandomNegative {
        outfit: Outfit {
            outfit_id: format!("{}#neg", outfit.outfit_id),
            shopper_id: outfit.shopper_id.clone(),
            items,
            label: Label::Negative,
            swapped_index: None,
        },
        kept_positions: kept,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeakNegative {
    pub source_outfit_id: String,
    pub swapped_index: usize,
    pub replacement_item_id: String,
    pub original_item_id: String,
    /// The source outfit with the single swap applied.
    pub outfit: Outfit,
}

fn alternatives(ds: &Dataset, outfit: &[usize], pos: usize) -> Vec<usize> {
    let orig = outfit[pos];
    ds.items_in_category(ds.category_of(orig))
        .iter()
        .copied()
        .filter(|c| !outfit.contains(c))
        .collect()
}

/// Positions whose category offers an item not already in the outfit.
pub fn swappable_positions(outfit: &Outfit, ds: &Dataset) -> Vec<usize> {
    (0..outfit.len())
        .filter(|&p| !alternatives(ds, &outfit.items, p).is_empty())
        .collect()
}

/// Swaps exactly one uniformly chosen position for a same-category item.
pub fn make_weak_negative(
    outfit: &Outfit,
    ds: &Dataset,
    rng: &mut Rng,
) -> Result<WeakNegative, SamplingError> {
    let positions = swappable_positions(outfit, ds);
    if positions.is_empty() {
        return Err(SamplingError::NoSwappablePosition(outfit.outfit_id.clone()));
    }
    let pos = positions[rng.gen_range(0..positions.len())];
    let alts = alternatives(ds, &outfit.items, pos);
    let repl = alts[rng.gen_range(0..alts.len())];
    let mut items = outfit.items.clone();
    let orig = items[pos];
    items[pos] = repl;
    Ok(WeakNegative {
        source_outfit_id: outfit.outfit_id.clone(),
        swapped_index: pos,
        replacement_item_id: ds.item(repl).item_id.clone(),
        original_item_id: ds.item(orig).item_id.clone(),
        outfit: Outfit {
            outfit_id: format!("{}#weak", outfit.outfit_id),
            shopper_id: outfit.shopper_id.clone(),
            items,
            label: Label::WeakNegative,
            swapped_index: Some(pos),
        },
    })
}

/// A CP-Hard negative: `outfit_id` belongs to another shopper and shares an
/// item with one of `shopper_id`'s outfits.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpHardPair {
    pub shopper_id: String,
    pub outfit_id: String,
}

/// All CP-Hard pairs whose negative outfit lies in `split`. A shopper's
/// exposure covers their outfits in every split. Sorted by
/// `(shopper_id, outfit_id)`.
pub fn build_cp_hard_pairs(ds: &Dataset, split: Split) -> Vec<CpHardPair> {
    let mut exposed: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    for (s, shopper) in ds.shoppers().iter().enumerate() {
        for &o in &shopper.outfits {
            for &i in &ds.outfit(o).items {
                exposed.entry(i).or_default().insert(s);
            }
        }
    }
    let mut pairs = Vec::new();
    for o in ds.outfits_in(split) {
        let owner = ds.owner(o);
        let mut shoppers = BTreeSet::new();
        for i in &ds.outfit(o).items {
            if let Some(set) = exposed.get(i) {
                shoppers.extend(set.iter().copied().filter(|&s| s != owner));
            }
        }
        for s in shoppers {
            pairs.push(CpHardPair {
                shopper_id: ds.shopper(s).shopper_id.clone(),
                outfit_id: ds.outfit(o).outfit_id.clone(),
            });
        }
    }
    pairs.sort();
    pairs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitbMode {
    Random,
    Hard,
}

/// A fill-in-the-blank question. The four candidates are the distractors
/// with the correct item inserted at `answer_position`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitbQuestion {
    pub outfit_id: String,
    pub shopper_id: String,
    pub mode: FitbMode,
    pub masked_position: usize,
    pub partial_item_ids: Vec<String>,
    pub correct_item_id: String,
    pub distractor_item_ids: Vec<String>,
    pub answer_position: usize,
}

impl FitbQuestion {
    pub fn candidates(&self) -> Vec<&str> {
        let mut c: Vec<&str> = self
            .distractor_item_ids
            .iter()
            .map(String::as_str)
            .collect();
        c.insert(self.answer_position, &self.correct_item_id);
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FitbStats {
    /// Hard-mode questions whose category was too small, so distractors were
    /// topped up from other categories.
    pub hard_fallbacks: usize,
}

pub const FITB_DISTRACTORS: usize = 3;

/// One question per outfit in `split`.
///
/// Distractors are drawn without replacement and never equal the correct
/// item or any item left in the partial outfit. Hard mode draws from the
/// masked item's category; when that category cannot supply three, the rest
/// come from other categories and a warning is logged.
pub fn build_fitb_questions(
    ds: &Dataset,
    split: Split,
    mode: FitbMode,
    rng: &mut Rng,
) -> Result<(Vec<FitbQuestion>, FitbStats), SamplingError> {
    let mut stats = FitbStats::default();
    let mut out = Vec::new();
    let n_items = ds.items().len();
    for o in ds.outfits_in(split) {
        let outfit = ds.outfit(o);
        let masked = rng.gen_range(0..outfit.len());
        let correct = outfit.items[masked];
        let excluded = |c: usize| outfit.items.contains(&c);
        let mut distractors: Vec<usize> = Vec::with_capacity(FITB_DISTRACTORS);
        if mode == FitbMode::Hard {
            let pool: Vec<usize> = ds
                .items_in_category(ds.category_of(correct))
                .iter()
                .copied()
                .filter(|&c| !excluded(c))
                .collect();
            let k = pool.len().min(FITB_DISTRACTORS);
            distractors.extend(sample(rng, pool.len(), k).into_iter().map(|j| pool[j]));
            if k < FITB_DISTRACTORS {
                stats.hard_fallbacks += 1;
                warn!(
                    "category {} too small for hard FITB on {}; topping up from other categories",
                    ds.categories()[ds.category_of(correct)],
                    outfit.outfit_id
                );
            }
        }
        if distractors.len() < FITB_DISTRACTORS {
            let pool: Vec<usize> = (0..n_items)
                .filter(|&c| !excluded(c) && !distractors.contains(&c))
                .collect();
            let need = FITB_DISTRACTORS - distractors.len();
            if pool.len() < need {
                return Err(SamplingError::TooFewCandidates {
                    outfit: outfit.outfit_id.clone(),
                    needed: need,
                    available: pool.len(),
                });
            }
            distractors.extend(sample(rng, pool.len(), need).into_iter().map(|j| pool[j]));
        }
        let answer_position = rng.gen_range(0..=FITB_DISTRACTORS);
        let ids = |v: &[usize]| -> Vec<String> {
            v.iter().map(|&i| ds.item(i).item_id.clone()).collect()
        };
        let mut partial = outfit.items.clone();
        partial.remove(masked);
        out.push(FitbQuestion {
            outfit_id: outfit.outfit_id.clone(),
            shopper_id: outfit.shopper_id.clone(),
            mode,
            masked_position: masked,
            partial_item_ids: ids(&partial),
            correct_item_id: ds.item(correct).item_id.clone(),
            distractor_item_ids: ids(&distractors),
            answer_position,
        });
    }
    Ok((out, stats))
}

/// Picks at most `max_history` outfits from `candidates`, never `target`.
/// The result is sorted by outfit index; order carries no meaning.
pub fn sample_history(
    candidates: &[usize],
    target: Option<usize>,
    max_history: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    let pool: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&o| Some(o) != target)
        .collect();
    let mut picked = if pool.len() <= max_history {
        pool
    } else {
        sample(rng, pool.len(), max_history)
            .into_iter()
            .map(|j| pool[j])
            .collect()
    };
    picked.sort_unstable();
    picked
}

/// Evaluation histories: each shopper's train outfits, subsampled once with a
/// stream keyed by `(seed, shopper_id)` so they are stable across runs.
pub fn frozen_histories(ds: &Dataset, max_history: usize, seed: u64) -> Vec<Vec<usize>> {
    ds.shoppers()
        .iter()
        .enumerate()
        .map(|(s, shopper)| {
            let mut rng = substream(keyed_hash(seed, &shopper.shopper_id), "eval_history");
            sample_history(
                &ds.shopper_outfits_in(s, Split::Train),
                None,
                max_history,
                &mut rng,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub shopper_id: String,
    pub positive_index: usize,
    pub positive: Outfit,
    pub negative: Outfit,
    pub weak: WeakNegative,
    /// Dataset indices of the shared history outfits.
    pub history: Vec<usize>,
}

impl TrainExample {
    pub fn swapped_index(&self) -> usize {
        self.weak.swapped_index
    }
}

/// Aligned positive / negative / weak-negative triples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Builds one example per positive in `positives`. Histories come from the
/// owner's train outfits. Examples whose sampler fails are dropped and
/// logged; the count of dropped examples is returned alongside.
pub fn assemble_batch(
    ds: &Dataset,
    positives: &[usize],
    max_history: usize,
    rng: &mut Rng,
) -> (TrainBatch, usize) {
    let mut batch = TrainBatch::default();
    let mut dropped = 0;
    for &o in positives {
        let outfit = ds.outfit(o);
        let weak = match make_weak_negative(outfit, ds, rng) {
            Ok(w) => w,
            Err(e) => {
                warn!("dropping example: {e}");
                dropped += 1;
                continue;
            }
        };
        let negative = make_random_negative(outfit, ds, rng).outfit;
        let owner = ds.owner(o);
        let history = sample_history(
            &ds.shopper_outfits_in(owner, Split::Train),
            Some(o),
            max_history,
            rng,
        );
        batch.examples.push(TrainExample {
            shopper_id: outfit.shopper_id.clone(),
            positive_index: o,
            positive: outfit.clone(),
            negative,
            weak,
            history,
        });
    }
    (batch, dropped)
}

/// Train outfits that can serve as targets (they admit a weak negative).
pub fn trainable_positives(ds: &Dataset) -> Vec<usize> {
    ds.outfits_in(Split::Train)
        .into_iter()
        .filter(|&o| !swappable_positions(ds.outfit(o), ds).is_empty())
        .collect()
}

/// The target order for one epoch: a permutation of `positives` that depends
/// only on `(seed, epoch)`.
pub fn epoch_order(positives: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = positives.to_vec();
    order.shuffle(&mut indexed_substream(seed, "epoch_order", epoch));
    order
}

/// Splits an epoch into batches of `batch_size`, assembling each with the
/// epoch's sampling stream.
pub fn epoch_batches(
    ds: &Dataset,
    positives: &[usize],
    batch_size: usize,
    max_history: usize,
    seed: u64,
    epoch: u64,
) -> Vec<TrainBatch> {
    let order = epoch_order(positives, seed, epoch);
    let mut rng = indexed_substream(seed, "sampling", epoch);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| assemble_batch(ds, chunk, max_history, &mut rng).0)
        .collect()
}

pub fn write_cp_hard_pairs(path: &Path, pairs: &[CpHardPair]) -> Result<(), SamplingError> {
    Ok(write_jsonl(path, pairs)?)
}

/// Reads pairs and checks every id resolves against `ds`.
pub fn read_cp_hard_pairs(path: &Path, ds: &Dataset) -> Result<Vec<CpHardPair>, SamplingError> {
    let pairs: Vec<CpHardPair> = read_jsonl(path)?;
    for p in &pairs {
        if ds.shopper_by_id(&p.shopper_id).is_none() {
            return Err(SamplingError::UnknownId {
                kind: "shopper",
                id: p.shopper_id.clone(),
            });
        }
        if ds.outfit_by_id(&p.outfit_id).is_none() {
            return Err(SamplingError::UnknownId {
                kind: "outfit",
                id: p.outfit_id.clone(),
            });
        }
    }
    Ok(pairs)
}

pub fn write_fitb_questions(path: &Path, questions: &[FitbQuestion]) -> Result<(), SamplingError> {
    Ok(write_jsonl(path, questions)?)
}

pub fn read_fitb_questions(path: &Path, ds: &Dataset) -> Result<Vec<FitbQuestion>, SamplingError> {
    let qs: Vec<FitbQuestion> = read_jsonl(path)?;
    for q in &qs {
        if ds.shopper_by_id(&q.shopper_id).is_none() {
            return Err(SamplingError::UnknownId {
                kind: "shopper",
                id: q.shopper_id.clone(),
            });
        }
        for id in q
            .candidates()
            .into_iter()
            .chain(q.partial_item_ids.iter().map(String::as_str))
        {
            if ds.item_by_id(id).is_none() {
                return Err(SamplingError::UnknownId {
                    kind: "item",
                    id: id.to_string(),
                });
            }
        }
    }
    Ok(qs)
}

/// Item indices of a question's candidates, in candidate order.
pub fn resolve_candidates(q: &FitbQuestion, ds: &Dataset) -> Result<Vec<usize>, SamplingError> {
    q.candidates()
        .into_iter()
        .map(|id| {
            ds.item_by_id(id).ok_or_else(|| SamplingError::UnknownId {
                kind: "item",
                id: id.to_string(),
            })
        })
        .collect()
}

/// Item indices of a question's partial outfit.
pub fn resolve_partial(q: &FitbQuestion, ds: &Dataset) -> Result<Vec<usize>, SamplingError> {
    q.partial_item_ids
        .iter()
        .map(|id| {
            ds.item_by_id(id).ok_or_else(|| SamplingError::UnknownId {
                kind: "item",
                id: id.clone(),
            })
        })
        .collect()
}

/// Distinct items a shopper has been exposed to across all splits.
pub fn shopper_items(ds: &Dataset, shopper: usize) -> HashSet<usize> {
    ds.shopper(shopper)
        .outfits
        .iter()
        .flat_map(|&o| ds.outfit(o).items.iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Item, OutfitRecord, ShopperRecord};

    fn item(id: &str, cat: &str) -> Item {
        Item {
            item_id: id.into(),
            category_id: cat.into(),
            image_embedding: vec![0.0],
            title_embedding: vec![0.0],
        }
    }

    fn ds(items: &[(&str, &str)], outfits: &[(&str, &str, &[&str])]) -> Dataset {
        let items = items.iter().map(|(i, c)| item(i, c)).collect();
        let mut shoppers: Vec<ShopperRecord> = Vec::new();
        let recs = outfits
            .iter()
            .map(|(o, s, its)| {
                match shoppers.iter_mut().find(|r| r.shopper_id == *s) {
                    Some(r) => r.outfit_ids.push(o.to_string()),
                    None => shoppers.push(ShopperRecord {
                        shopper_id: s.to_string(),
                        outfit_ids: vec![o.to_string()],
                    }),
                }
                OutfitRecord {
                    outfit_id: o.to_string(),
                    shopper_id: s.to_string(),
                    item_ids: its.iter().map(|x| x.to_string()).collect(),
                }
            })
            .collect();
        Dataset::from_records(items, recs, shoppers, 20).unwrap()
    }

    fn pairs_ds() -> Dataset {
        ds(
            &[
                ("a1", "a"),
                ("a2", "a"),
                ("b1", "b"),
                ("b2", "b"),
                ("c1", "c"),
                ("c2", "c"),
            ],
            &[
                ("o1", "u", &["a1", "b1", "c1"]),
                ("o2", "v", &["a2", "b2", "c2"]),
            ],
        )
    }

    #[test]
    fn forced_choice_negative() {
        let d = pairs_ds();
        let mut rng = substream(1, "t");
        let neg = make_random_negative(d.outfit(0), &d, &mut rng);
        assert_eq!(d.item_ids_of(&neg.outfit), vec!["a2", "b2", "c2"]);
        assert_eq!(neg.outfit.label, Label::Negative);
        assert!(neg.kept_positions.is_empty());
    }

    #[test]
    fn singleton_category_is_kept_and_counted() {
        let d = ds(
            &[("a1", "a"), ("b1", "b"), ("b2", "b")],
            &[("o1", "u", &["a1", "b1"])],
        );
        let mut rng = substream(1, "t");
        let neg = make_random_negative(d.outfit(0), &d, &mut rng);
        assert_eq!(neg.kept_positions, vec![0]);
        assert_eq!(d.item_ids_of(&neg.outfit), vec!["a1", "b2"]);
        let w = make_weak_negative(d.outfit(0), &d, &mut rng).unwrap();
        assert_eq!(w.swapped_index, 1);
    }

    #[test]
    fn no_swappable_position_is_an_error() {
        let d = ds(&[("a1", "a"), ("b1", "b")], &[("o1", "u", &["a1", "b1"])]);
        let mut rng = substream(1, "t");
        assert!(matches!(
            make_weak_negative(d.outfit(0), &d, &mut rng),
            Err(SamplingError::NoSwappablePosition(_))
        ));
    }

    #[test]
    fn weak_negative_swaps_one_position() {
        let d = pairs_ds();
        let mut rng = substream(2, "t");
        for _ in 0..50 {
            let w = make_weak_negative(d.outfit(0), &d, &mut rng).unwrap();
            let src = &d.outfit(0).items;
            let diff: Vec<usize> = (0..3).filter(|&p| src[p] != w.outfit.items[p]).collect();
            assert_eq!(diff, vec![w.swapped_index]);
            assert_eq!(w.outfit.swapped_index, Some(w.swapped_index));
        }
    }

    #[test]
    fn shared_watch_pairs_are_mutual() {
        let d = ds(
            &[("watch", "acc"), ("t1", "top"), ("t2", "top"), ("x", "acc")],
            &[
                ("o1", "u", &["watch", "t1"]),
                ("o2", "v", &["watch", "t2"]),
                ("o3", "w", &["x", "t2"]),
            ],
        );
        let pairs = build_cp_hard_pairs(&d, Split::Train);
        let got: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.shopper_id.as_str(), p.outfit_id.as_str()))
            .collect();
        // v and w share t2 as well
        assert_eq!(
            got,
            vec![("u", "o2"), ("v", "o1"), ("v", "o3"), ("w", "o2")]
        );
    }

    #[test]
    fn disjoint_shoppers_have_no_pairs() {
        assert!(build_cp_hard_pairs(&pairs_ds(), Split::Train).is_empty());
    }

    #[test]
    fn history_edge_cases() {
        let mut rng = substream(3, "t");
        assert!(sample_history(&[1, 2, 3], None, 0, &mut rng).is_empty());
        assert_eq!(
            sample_history(&[0, 1, 2, 3, 4], Some(2), 10, &mut rng),
            vec![0, 1, 3, 4]
        );
        let h = sample_history(&(0..30).collect::<Vec<_>>(), Some(7), 10, &mut rng);
        assert_eq!(h.len(), 10);
        assert!(!h.contains(&7));
    }

    #[test]
    fn hard_mode_falls_back_when_category_is_small() {
        let d = ds(
            &[
                ("a1", "a"),
                ("a2", "a"),
                ("b1", "b"),
                ("b2", "b"),
                ("b3", "b"),
                ("b4", "b"),
            ],
            &[("o1", "u", &["a1", "b1"])],
        );
        let mut rng = substream(4, "t");
        let mut fallbacks = 0;
        for _ in 0..20 {
            let (qs, stats) =
                build_fitb_questions(&d, Split::Train, FitbMode::Hard, &mut rng).unwrap();
            fallbacks += stats.hard_fallbacks;
            let q = &qs[0];
            let cands = q.candidates();
            assert_eq!(cands.len(), 4);
            assert_eq!(cands.iter().collect::<HashSet<_>>().len(), 4);
            assert!(!cands
                .iter()
                .any(|c| q.partial_item_ids.iter().any(|p| p == c)));
        }
        assert!(fallbacks > 0);
    }

    #[test]
    fn cp_pairs_and_questions_round_trip() {
        let d = pairs_ds();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        let mut rng = substream(5, "t");
        let (qs, _) = build_fitb_questions(&d, Split::Train, FitbMode::Random, &mut rng).unwrap();
        write_fitb_questions(&p, &qs).unwrap();
        assert_eq!(read_fitb_questions(&p, &d).unwrap(), qs);
        let pairs = vec![CpHardPair {
            shopper_id: "u".into(),
            outfit_id: "o2".into(),
        }];
        let p = dir.path().join("p.jsonl");
        write_cp_hard_pairs(&p, &pairs).unwrap();
        assert_eq!(read_cp_hard_pairs(&p, &d).unwrap(), pairs);
        let bad = vec![CpHardPair {
            shopper_id: "nobody".into(),
            outfit_id: "o2".into(),
        }];
        write_cp_hard_pairs(&p, &bad).unwrap();
        assert!(read_cp_hard_pairs(&p, &d).is_err());
    }

    #[test]
    fn batch_of_four() {
        let d = ds(
            &[("a1", "a"), ("a2", "a"), ("b1", "b"), ("b2", "b")],
            &[
                ("o1", "u", &["a1", "b1"]),
                ("o2", "u", &["a2", "b1"]),
                ("o3", "v", &["a1", "b2"]),
                ("o4", "v", &["a2", "b2"]),
            ],
        );
        let (b, dropped) = assemble_batch(&d, &[0, 1, 2, 3], 10, &mut substream(6, "t"));
        assert_eq!(dropped, 0);
        assert_eq!(b.len(), 4);
        for e in &b.examples {
            assert_eq!(e.positive.label, Label::Positive);
            assert_eq!(e.negative.label, Label::Negative);
            assert_eq!(e.weak.outfit.label, Label::WeakNegative);
            assert!(!e.history.contains(&e.positive_index));
            assert_eq!(e.history.len(), 1);
        }
        let (again, _) = assemble_batch(&d, &[0, 1, 2, 3], 10, &mut substream(6, "t"));
        assert_eq!(b, again);
    }
}
