//! Synthetic shoppers with latent styles.
//!
//! Construction:
//!
//! * each style cluster gets a unit style vector (orthonormal when the
//!   embedding is wide enough) and each category a unit anchor;
//! * the first `shared_items_per_category` items of every category are
//!   neutral basics (no style component), the rest are styled and dealt to
//!   clusters round-robin;
//! * item image embedding = anchor + style vector + N(0, σ²) noise, and the
//!   title embedding is the image embedding under one fixed random rotation;
//! * shopper `u` belongs to cluster `u mod n_style_clusters` and draws its
//!   styled items from a small personal subset of its cluster's items in each
//!   category, with a basic substituted at rate `shared_item_prob`;
//! * the first outfit of every shopper carries its cluster's signature item
//!   (the cluster's first styled item of the first category), so every pair
//!   of same-cluster shoppers shares at least one item.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Item, OutfitRecord, ShopperRecord, DEFAULT_MAX_OUTFIT_ITEMS};
use crate::rng::{substream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_shoppers: usize,
    pub n_style_clusters: usize,
    pub n_categories: usize,
    pub items_per_category: usize,
    /// Neutral items at the head of each category, usable by every shopper.
    pub shared_items_per_category: usize,
    /// Size of each shopper's personal pool of styled items per category.
    pub shopper_items_per_category: usize,
    /// Probability that an outfit slot takes a neutral item.
    pub shared_item_prob: f64,
    pub outfit_size_min: usize,
    pub outfit_size_max: usize,
    pub outfits_per_shopper: usize,
    /// Width of both the image and the title embedding.
    pub embedding_dim: usize,
    /// Per-coordinate standard deviation of the item noise.
    pub style_noise: f64,
}

impl SynthConfig {
    /// The desk-scale configuration used throughout the tests and shipped as
    /// `configs/synth_default.toml`.
    pub fn desk_default() -> Self {
        SynthConfig {
            n_shoppers: 40,
            n_style_clusters: 2,
            n_categories: 5,
            items_per_category: 30,
            shared_items_per_category: 3,
            shopper_items_per_category: 2,
            shared_item_prob: 0.2,
            outfit_size_min: 3,
            outfit_size_max: 4,
            outfits_per_shopper: 30,
            embedding_dim: 16,
            style_noise: 0.2,
        }
    }

    fn styled_per_cluster_min(&self) -> usize {
        let styled = self.items_per_category - self.shared_items_per_category;
        styled / self.n_style_clusters
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.n_shoppers == 0 || self.outfits_per_shopper == 0 {
            return fail("n_shoppers and outfits_per_shopper must be positive".into());
        }
        if self.n_style_clusters == 0 || self.n_categories == 0 || self.embedding_dim == 0 {
            return fail(
                "n_style_clusters, n_categories and embedding_dim must be positive".into(),
            );
        }
        if self.outfit_size_min < 2 || self.outfit_size_min > self.outfit_size_max {
            return fail(format!(
                "outfit size range {}..={} must start at 2 or more and be non-empty",
                self.outfit_size_min, self.outfit_size_max
            ));
        }
        if self.outfit_size_max > self.n_categories {
            return fail(format!(
                "outfit_size_max {} exceeds n_categories {} (one item per category)",
                self.outfit_size_max, self.n_categories
            ));
        }
        if self.outfit_size_max > DEFAULT_MAX_OUTFIT_ITEMS {
            return fail(format!(
                "outfit_size_max {} exceeds {DEFAULT_MAX_OUTFIT_ITEMS}",
                self.outfit_size_max
            ));
        }
        if self.shared_items_per_category >= self.items_per_category {
            return fail("shared_items_per_category must leave room for styled items".into());
        }
        if self.shopper_items_per_category == 0
            || self.shopper_items_per_category > self.styled_per_cluster_min()
        {
            return fail(format!(
                "shopper_items_per_category {} must be in 1..={} (styled items per cluster)",
                self.shopper_items_per_category,
                self.styled_per_cluster_min()
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_item_prob) {
            return fail("shared_item_prob must lie in [0, 1]".into());
        }
        if self.shared_item_prob > 0.0 && self.shared_items_per_category == 0 {
            return fail("shared_item_prob > 0 needs shared items".into());
        }
        if !(self.style_noise >= 0.0 && self.style_noise.is_finite()) {
            return fail("style_noise must be finite and non-negative".into());
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Modified Gram–Schmidt over Gaussian draws. Returns `k` unit vectors that
/// are mutually orthogonal while `k ≤ dim`.
fn orthonormal_set(rng: &mut Rng, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut v = gaussian_vec(rng, dim);
        if i < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        normalize(&mut v);
        out.push(v);
    }
    out
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut rng = substream(seed, "data");
    let dim = config.embedding_dim;

    let styles = orthonormal_set(&mut rng, config.n_style_clusters, dim);
    let anchors: Vec<Vec<f64>> = (0..config.n_categories)
        .map(|_| {
            let mut a = gaussian_vec(&mut rng, dim);
            normalize(&mut a);
            a
        })
        .collect();
    let rotation = orthonormal_set(&mut rng, dim, dim);

    // styled[category][cluster] = global item indices
    let mut styled = vec![vec![Vec::new(); config.n_style_clusters]; config.n_categories];
    let mut shared = vec![Vec::new(); config.n_categories];
    let mut categories = Vec::with_capacity(config.n_categories * config.items_per_category);
    let mut items = Vec::with_capacity(categories.capacity());
    for (c, anchor) in anchors.iter().enumerate() {
        for j in 0..config.items_per_category {
            let cluster = if j < config.shared_items_per_category {
                None
            } else {
                Some((j - config.shared_items_per_category) % config.n_style_clusters)
            };
            let mut img = anchor.clone();
            if let Some(k) = cluster {
                img.iter_mut().zip(&styles[k]).for_each(|(a, s)| *a += s);
            }
            for x in img.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += config.style_noise * z;
            }
            let title: Vec<f64> = rotation
                .iter()
                .map(|r| r.iter().zip(&img).map(|(a, b)| a * b).sum())
                .collect();
            let idx = items.len();
            match cluster {
                Some(k) => styled[c][k].push(idx),
                None => shared[c].push(idx),
            }
            categories.push(c);
            items.push(Item {
                item_id: format!("c{c:02}_i{j:03}"),
                category_id: format!("cat{c:02}"),
                image_embedding: img,
                title_embedding: title,
            });
        }
    }

    let mut outfits = Vec::new();
    let mut shoppers = Vec::with_capacity(config.n_shoppers);
    for u in 0..config.n_shoppers {
        let cluster = u % config.n_style_clusters;
        let pools: Vec<Vec<usize>> = (0..config.n_categories)
            .map(|c| {
                let cand = &styled[c][cluster];
                sample(&mut rng, cand.len(), config.shopper_items_per_category)
                    .into_iter()
                    .map(|k| cand[k])
                    .collect()
            })
            .collect();
        let shopper_id = format!("s{u:03}");
        let mut ids = Vec::with_capacity(config.outfits_per_shopper);
        for k in 0..config.outfits_per_shopper {
            let size = rng.gen_range(config.outfit_size_min..=config.outfit_size_max);
            let mut cats: Vec<usize> = if k == 0 {
                let mut rest: Vec<usize> = sample(&mut rng, config.n_categories - 1, size - 1)
                    .into_iter()
                    .map(|c| c + 1)
                    .collect();
                rest.push(0);
                rest
            } else {
                sample(&mut rng, config.n_categories, size).into_vec()
            };
            cats.sort_unstable();
            let item_ids: Vec<String> = cats
                .iter()
                .map(|&c| {
                    let chosen = if k == 0 && c == 0 {
                        styled[0][cluster][0]
                    } else if !shared[c].is_empty() && rng.gen_bool(config.shared_item_prob) {
                        shared[c][rng.gen_range(0..shared[c].len())]
                    } else {
                        pools[c][rng.gen_range(0..pools[c].len())]
                    };
                    debug_assert_eq!(categories[chosen], c);
                    items[chosen].item_id.clone()
                })
                .collect();
            let outfit_id = format!("{shopper_id}_o{k:03}");
            ids.push(outfit_id.clone());
            outfits.push(OutfitRecord {
                outfit_id,
                shopper_id: shopper_id.clone(),
                item_ids,
            });
        }
        shoppers.push(ShopperRecord {
            shopper_id,
            outfit_ids: ids,
        });
    }
    Dataset::from_records(items, outfits, shoppers, DEFAULT_MAX_OUTFIT_ITEMS)
}

/// Style cluster of a synthetic shopper id (`sNNN`).
pub fn synthetic_shopper_cluster(config: &SynthConfig, shopper_id: &str) -> Option<usize> {
    let n: usize = shopper_id.strip_prefix('s')?.parse().ok()?;
    Some(n % config.n_style_clusters)
}
