//! Frequency checks on the samplers against their exact distributions.

mod common;

use std::collections::HashMap;

use hat_core::data::{
    generate_synthetic, split_dataset, Dataset, Split, SplitFractions, SynthConfig,
};
use hat_core::sampling::{
    build_cp_hard_pairs, build_fitb_questions, make_random_negative, make_weak_negative,
    resolve_candidates, FitbMode,
};

use common::rng;

fn desk() -> Dataset {
    let ds = generate_synthetic(&SynthConfig::desk_default(), 0).unwrap();
    split_dataset(ds, SplitFractions::new(0.8, 0.1, 0.1).unwrap(), 0).0
}

/// Every count within `k` binomial standard deviations of `n·p`.
fn within_binomial(counts: &[usize], n: usize, p: f64, k: f64) -> Result<(), String> {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        if (c as f64 - mean).abs() > k * sd {
            return Err(format!("cell {i}: {c} vs {mean:.1} ± {:.1}", k * sd));
        }
    }
    Ok(())
}

#[test]
fn random_negative_replacements_are_uniform() {
    let ds = desk();
    let outfit = ds.outfit(0);
    let cat = ds.category_of(outfit.items[0]);
    let others: Vec<usize> = ds
        .items_in_category(cat)
        .iter()
        .copied()
        .filter(|&i| i != outfit.items[0])
        .collect();
    let n = 29_000;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut r = rng(1);
    for _ in 0..n {
        let neg = make_random_negative(outfit, &ds, &mut r);
        *counts.entry(neg.outfit.items[0]).or_default() += 1;
    }
    assert_eq!(counts.len(), others.len());
    let cells: Vec<usize> = others.iter().map(|i| counts[i]).collect();
    within_binomial(&cells, n, 1.0 / others.len() as f64, 4.0).unwrap();
}

#[test]
fn weak_negative_position_and_item_are_uniform() {
    let ds = desk();
    let outfit = ds.outfit(3);
    let l = outfit.len();
    let n = 20_000;
    let mut r = rng(2);
    let mut pos = vec![0usize; l];
    let mut repl: HashMap<usize, usize> = HashMap::new();
    for _ in 0..n {
        let w = make_weak_negative(outfit, &ds, &mut r).unwrap();
        pos[w.swapped_index] += 1;
        if w.swapped_index == 0 {
            *repl.entry(w.outfit.items[0]).or_default() += 1;
        }
    }
    within_binomial(&pos, n, 1.0 / l as f64, 4.0).unwrap();
    // One item per category in synthetic outfits, so every other item of
    // the category is an alternative.
    let alts = ds.items_in_category(ds.category_of(outfit.items[0])).len() - 1;
    assert_eq!(repl.len(), alts);
    let cells: Vec<usize> = repl.values().copied().collect();
    within_binomial(&cells, pos[0], 1.0 / alts as f64, 4.0).unwrap();
}

#[test]
fn random_fitb_contamination_matches_hypergeometric() {
    // Three categories of ten items and three-item outfits: the 27 eligible
    // distractors hold 9 of the masked item's category, so the number of
    // same-category distractors is hypergeometric(27, 9, 3) with mean 1.
    let config = SynthConfig {
        n_shoppers: 20,
        n_style_clusters: 2,
        n_categories: 3,
        items_per_category: 10,
        shared_items_per_category: 2,
        shopper_items_per_category: 2,
        shared_item_prob: 0.2,
        outfit_size_min: 3,
        outfit_size_max: 3,
        outfits_per_shopper: 10,
        embedding_dim: 4,
        style_noise: 0.2,
    };
    let ds = generate_synthetic(&config, 5).unwrap();
    let ds = split_dataset(ds, SplitFractions::new(0.0, 0.0, 1.0).unwrap(), 5).0;
    let mut r = rng(3);
    let (mut total, mut n) = (0usize, 0usize);
    let mut answer = [0usize; 4];
    for _ in 0..20 {
        let (qs, _) = build_fitb_questions(&ds, Split::Test, FitbMode::Random, &mut r).unwrap();
        for q in &qs {
            let cands = resolve_candidates(q, &ds).unwrap();
            let correct = cands[q.answer_position];
            total += cands
                .iter()
                .enumerate()
                .filter(|&(i, &c)| {
                    i != q.answer_position && ds.category_of(c) == ds.category_of(correct)
                })
                .count();
            answer[q.answer_position] += 1;
            n += 1;
        }
    }
    let var = 3.0 * (9.0 / 27.0) * (18.0 / 27.0) * (24.0 / 26.0);
    let mean = total as f64 / n as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 4.0 * se, "{mean} vs 1 ± {}", 4.0 * se);
    // Same-category share of distractors is one third.
    assert!((mean / 3.0 - 1.0 / 3.0).abs() < 0.02);
    within_binomial(&answer, n, 0.25, 4.0).unwrap();
}

#[test]
fn hard_fitb_draws_from_the_masked_category() {
    let ds = desk();
    let (qs, stats) = build_fitb_questions(&ds, Split::Test, FitbMode::Hard, &mut rng(4)).unwrap();
    assert_eq!(stats.hard_fallbacks, 0);
    assert!(!qs.is_empty());
    for q in &qs {
        let cands = resolve_candidates(q, &ds).unwrap();
        let cat = ds.category_of(cands[q.answer_position]);
        assert!(cands.iter().all(|&c| ds.category_of(c) == cat));
    }
}

#[test]
fn desk_default_has_cp_hard_pairs() {
    let ds = desk();
    let pairs = build_cp_hard_pairs(&ds, Split::Test);
    assert!(!pairs.is_empty());
    let outfits: std::collections::BTreeSet<&str> =
        pairs.iter().map(|p| p.outfit_id.as_str()).collect();
    // Most test outfits contain a basic item shared with some other shopper.
    assert!(
        outfits.len() * 2 > ds.outfits_in(Split::Test).len(),
        "{}",
        outfits.len()
    );
}
