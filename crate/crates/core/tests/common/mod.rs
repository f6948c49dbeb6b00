#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

use hat_core::data::{generate_synthetic, split_dataset, Dataset, SplitFractions, SynthConfig};
use hat_core::losses::{total_loss, LossSwitches, LossWeights};
use hat_core::model::{HatConfig, HatModel, ModelError, PoolScale};
use hat_core::numerics::{finite_difference_check, GradCheckReport};
use hat_core::rng::Rng;
use hat_core::sampling::{assemble_batch, trainable_positives, TrainBatch};

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// A few shoppers, outfits of 2 to 4 items, small embeddings.
pub fn tiny_synth(seed: u64) -> Dataset {
    let config = SynthConfig {
        n_shoppers: 6,
        n_style_clusters: 2,
        n_categories: 4,
        items_per_category: 8,
        shared_items_per_category: 2,
        shopper_items_per_category: 2,
        shared_item_prob: 0.2,
        outfit_size_min: 2,
        outfit_size_max: 4,
        outfits_per_shopper: 6,
        embedding_dim: 3,
        style_noise: 0.3,
    };
    let ds = generate_synthetic(&config, seed).unwrap();
    split_dataset(ds, SplitFractions::new(0.5, 0.25, 0.25).unwrap(), seed).0
}

pub fn tiny_model_config(max_history: usize) -> HatConfig {
    HatConfig {
        d: 8,
        bottom_layers: 1,
        bottom_heads: 2,
        top_layers: 1,
        top_heads: 2,
        ff_mult: 2,
        adapter_hidden: 8,
        max_history,
        pool_scale: PoolScale::D,
    }
}

/// A batch of `k` examples from two different shoppers, with histories of
/// at most `max_history` outfits.
pub fn batch_from_two_shoppers(
    ds: &Dataset,
    k: usize,
    max_history: usize,
    rng: &mut Rng,
) -> TrainBatch {
    let positives = trainable_positives(ds);
    loop {
        let picked: Vec<usize> = positives.choose_multiple(rng, k).copied().collect();
        let owners: Vec<usize> = picked.iter().map(|&o| ds.owner(o)).collect();
        if k > 1 && owners.iter().all(|&s| s == owners[0]) {
            continue;
        }
        let (batch, dropped) = assemble_batch(ds, &picked, max_history, rng);
        assert_eq!(dropped, 0);
        return batch;
    }
}

/// Finite-difference check of the full weighted training loss for one
/// random model, batch and set of loss weights.
pub fn full_loss_gradcheck(seed: u64, tolerance: f64) -> GradCheckReport {
    let mut r = rng(seed);
    let ds = tiny_synth(seed);
    let max_history = 2;
    let batch = batch_from_two_shoppers(&ds, 2, max_history, &mut r);
    let mut template = HatModel::for_dataset(tiny_model_config(max_history), &ds, seed).unwrap();
    let weights = LossWeights {
        c_fl: r.gen_range(0.5..1.5),
        c_cl: r.gen_range(0.5..1.5),
        c_am: r.gen_range(0.2..1.0),
        alpha: r.gen_range(0.2..0.8),
        gamma: r.gen_range(0.0..3.0),
        tau: r.gen_range(0.5..2.0),
        margin: r.gen_range(2.0..6.0),
    };
    let model = template.clone();
    finite_difference_check::<ModelError, _>(
        &mut template.store,
        |store, tape| {
            let mut m = model.clone();
            m.store = store.clone();
            let out = m.forward_full(tape, &ds, &batch)?;
            let (loss, _) = total_loss(tape, &out, &weights, LossSwitches::default())
                .map_err(|e| ModelError::Config(e.to_string()))?;
            Ok(loss)
        },
        1e-3,
        tolerance,
    )
    .unwrap()
}
