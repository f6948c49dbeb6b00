//! Training loop, best-checkpoint selection and the ablation suite.

use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, Dataset, Split, SplitFractions};
use crate::eval::{auc, cp_scores, evaluate, EvalError, EvalOptions, Task};
use crate::losses::{total_loss, LossBreakdown, LossError, LossSwitches, LossWeights};
use crate::model::{HatConfig, HatModel, ModelError, SplitRecord};
use crate::numerics::{AdamW, AdamWConfig, Checkpoint, NumericsError, StepOutcome, Tape};
use crate::sampling::{epoch_batches, trainable_positives};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub disable_cl: bool,
    pub disable_am: bool,
    pub fixed_margin: bool,
    /// Overrides `max_history` when set.
    pub history_cap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_history: usize,
    pub grad_clip: f64,
    /// Train / val / test fractions applied per shopper.
    pub split: [f64; 3],
    pub loss: LossWeights,
    pub model: HatConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            max_history: 10,
            grad_clip: 5.0,
            split: [0.8, 0.1, 0.1],
            loss: LossWeights::default(),
            model: HatConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(
        "no trainable positives: every train outfit lacks a same-category alternative for a swap"
    )]
    NoTrainablePositives,
    #[error("non-finite loss at step {step}; returning the last good checkpoint")]
    Diverged {
        step: u64,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

impl TrainConfig {
    pub fn history_cap(&self) -> usize {
        self.ablation.history_cap.unwrap_or(self.max_history)
    }

    pub fn switches(&self) -> LossSwitches {
        LossSwitches {
            disable_cl: self.ablation.disable_cl,
            disable_am: self.ablation.disable_am,
            fixed_margin: self.ablation.fixed_margin,
        }
    }

    pub fn fractions(&self) -> Result<SplitFractions, TrainError> {
        SplitFractions::new(self.split[0], self.split[1], self.split[2]).map_err(Into::into)
    }

    /// The model config with its history bound raised to this run's cap.
    pub fn effective_model(&self) -> HatConfig {
        HatConfig {
            max_history: self.model.max_history.max(self.history_cap()),
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        let positive = |x: f64| x > 0.0;
        if !positive(self.lr)
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
            || !positive(self.grad_clip)
        {
            return Err(TrainError::Config(
                "lr and grad_clip must be positive, weight_decay non-negative".into(),
            ));
        }
        self.fractions()?;
        self.loss.validate()?;
        self.effective_model().validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub components: LossBreakdown,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation CP-Random AUC.
    pub best: HatModel,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    /// Parameters after the last epoch.
    pub last: HatModel,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub dropped_examples: usize,
}

impl TrainOutcome {
    /// The best parameters, tagged with the split they were trained on.
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        self.best.to_checkpoint_with_split(
            self.steps.len() as u64,
            Some(SplitRecord {
                fractions: config.split,
                seed: config.seed,
            }),
        )
    }
}

/// Validation CP-Random AUC, or `None` when the val split is empty.
fn validation_auc(
    model: &HatModel,
    ds: &Dataset,
    cap: usize,
    seed: u64,
) -> Result<Option<f64>, TrainError> {
    if ds.outfits_in(Split::Val).is_empty() {
        return Ok(None);
    }
    let scored = cp_scores(model, ds, Task::CpRandom, cap, seed, Split::Val)?;
    let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    Ok(Some(auc(&pos, &neg)?))
}

/// Trains on the train split of `ds`, which must already carry its split
/// assignment. Deterministic for fixed `(ds, config)`.
pub fn train(ds: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let cap = config.history_cap();
    let switches = config.switches();
    let mut model = HatModel::for_dataset(config.effective_model(), ds, config.seed)?;
    let positives = trainable_positives(ds);
    if positives.is_empty() {
        return Err(TrainError::NoTrainablePositives);
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &model.store,
    );
    let mut best = model.clone();
    let mut best_val = validation_auc(&model, ds, cap, config.seed)?;
    let mut best_epoch = 0;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut dropped = 0;
    let expected: usize = positives.len();

    for epoch in 1..=config.epochs {
        let batches = epoch_batches(
            ds,
            &positives,
            config.batch_size,
            cap,
            config.seed,
            epoch as u64,
        );
        let mut sum = LossBreakdown::default();
        let mut n_batches = 0;
        let seen: usize = batches.iter().map(|b| b.len()).sum();
        dropped += expected - seen;
        for batch in batches {
            if batch.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let out = model.forward_full(&mut tape, ds, &batch)?;
            let (loss, parts) = total_loss(&mut tape, &out, &config.loss, switches)?;
            let step = steps.len() as u64 + 1;
            if !parts.total.is_finite() {
                warn!("non-finite loss at step {step}");
                return Err(TrainError::Diverged {
                    step,
                    last_good: Box::new(best.to_checkpoint(step - 1)),
                });
            }
            model.store.zero_grad();
            tape.backward(loss, &mut model.store)?;
            let norm = model.store.grad_norm();
            let clipped = norm > config.grad_clip;
            if clipped {
                debug!(
                    "step {step}: clipping gradient norm {norm:.3} to {}",
                    config.grad_clip
                );
                model.store.scale_grads(config.grad_clip / norm);
            }
            if opt.step(&mut model.store) == StepOutcome::SkippedNonFinite {
                warn!("step {step}: non-finite gradient, update skipped");
            }
            steps.push(StepRecord {
                step,
                loss: parts,
                grad_norm: norm,
                clipped,
            });
            sum.focal += parts.focal;
            sum.contrastive += parts.contrastive;
            sum.margin += parts.margin;
            sum.total += parts.total;
            n_batches += 1;
        }
        let nb = n_batches.max(1) as f64;
        let mean = LossBreakdown {
            focal: sum.focal / nb,
            contrastive: sum.contrastive / nb,
            margin: sum.margin / nb,
            total: sum.total / nb,
        };
        let val = validation_auc(&model, ds, cap, config.seed)?;
        info!(
            "epoch {epoch}: loss {:.4} (fl {:.4} cl {:.4} am {:.4}) val_auc {}",
            mean.total,
            mean.focal,
            mean.contrastive,
            mean.margin,
            val.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss: mean.total,
            components: mean,
            val_auc: val,
        });
        let better = match (val, best_val) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if better {
            best = model.clone();
            best_val = val;
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_auc: best_val,
        last: model,
        steps,
        epochs,
        dropped_examples: dropped,
    })
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<(), TrainError> {
    let io = |e: std::io::Error| TrainError::Io(path.display().to_string(), e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `steps.jsonl` and `epochs.jsonl` into `dir`.
pub fn write_logs(outcome: &TrainOutcome, dir: &Path) -> Result<(), TrainError> {
    write_lines(&dir.join("steps.jsonl"), &outcome.steps)?;
    write_lines(&dir.join("epochs.jsonl"), &outcome.epochs)
}

/// The seven ablation runs: the full model, each loss switch, and the three
/// alternative history caps.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut Ablation)| {
        let mut c = base.clone();
        c.ablation = Ablation::default();
        f(&mut c.ablation);
        c
    };
    vec![
        ("full".into(), with(&|_| {})),
        ("no_cl".into(), with(&|a| a.disable_cl = true)),
        ("no_am".into(), with(&|a| a.disable_am = true)),
        ("fixed_margin".into(), with(&|a| a.fixed_margin = true)),
        ("history_0".into(), with(&|a| a.history_cap = Some(0))),
        ("history_20".into(), with(&|a| a.history_cap = Some(20))),
        ("history_30".into(), with(&|a| a.history_cap = Some(30))),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
    pub max_history: usize,
    pub disable_cl: bool,
    pub disable_am: bool,
    pub fixed_margin: bool,
    pub best_epoch: usize,
    pub cp_random_auc: Option<f64>,
    pub cp_random_lower: Option<f64>,
    pub cp_random_upper: Option<f64>,
    pub cp_hard_auc: Option<f64>,
    pub cp_hard_lower: Option<f64>,
    pub cp_hard_upper: Option<f64>,
    pub fitb_random_acc: Option<f64>,
    pub fitb_random_lower: Option<f64>,
    pub fitb_random_upper: Option<f64>,
    pub fitb_hard_acc: Option<f64>,
    pub fitb_hard_lower: Option<f64>,
    pub fitb_hard_upper: Option<f64>,
    pub error: Option<String>,
}

/// Trains and evaluates every ablation variant on one shared split. A
/// failing variant yields a row with its error and the suite continues.
pub fn run_ablation_suite(
    ds: &Dataset,
    base: &TrainConfig,
    resamples: usize,
    fingerprint: &str,
) -> Result<Vec<AblationRow>, TrainError> {
    base.validate()?;
    let (split, report) = split_dataset(ds.clone(), base.fractions()?, base.seed);
    if !report.small_shoppers.is_empty() {
        warn!(
            "{} shoppers kept entirely in train",
            report.small_shoppers.len()
        );
    }
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        info!("ablation variant {name}");
        let mut row = AblationRow {
            variant: name.clone(),
            dataset_fingerprint: fingerprint.to_string(),
            seed: cfg.seed,
            max_history: cfg.history_cap(),
            disable_cl: cfg.ablation.disable_cl,
            disable_am: cfg.ablation.disable_am,
            fixed_margin: cfg.ablation.fixed_margin,
            best_epoch: 0,
            cp_random_auc: None,
            cp_random_lower: None,
            cp_random_upper: None,
            cp_hard_auc: None,
            cp_hard_lower: None,
            cp_hard_upper: None,
            fitb_random_acc: None,
            fitb_random_lower: None,
            fitb_random_upper: None,
            fitb_hard_acc: None,
            fitb_hard_lower: None,
            fitb_hard_upper: None,
            error: None,
        };
        match train(&split, &cfg) {
            Ok(out) => {
                row.best_epoch = out.best_epoch;
                let opts = EvalOptions {
                    resamples,
                    ..EvalOptions::new(cfg.history_cap(), cfg.seed)
                };
                let mut errors = Vec::new();
                for task in Task::ALL {
                    match evaluate(&out.best, &split, task, &opts) {
                        Ok(r) => {
                            let r = r.report;
                            let slot = match task {
                                Task::CpRandom => (
                                    &mut row.cp_random_auc,
                                    &mut row.cp_random_lower,
                                    &mut row.cp_random_upper,
                                ),
                                Task::CpHard => (
                                    &mut row.cp_hard_auc,
                                    &mut row.cp_hard_lower,
                                    &mut row.cp_hard_upper,
                                ),
                                Task::FitbRandom => (
                                    &mut row.fitb_random_acc,
                                    &mut row.fitb_random_lower,
                                    &mut row.fitb_random_upper,
                                ),
                                Task::FitbHard => (
                                    &mut row.fitb_hard_acc,
                                    &mut row.fitb_hard_lower,
                                    &mut row.fitb_hard_upper,
                                ),
                            };
                            *slot.0 = Some(r.point);
                            *slot.1 = Some(r.lower);
                            *slot.2 = Some(r.upper);
                        }
                        Err(e) => errors.push(format!("{task}: {e}")),
                    }
                }
                if !errors.is_empty() {
                    row.error = Some(errors.join("; "));
                }
            }
            Err(e) => {
                warn!("variant {name} failed: {e}");
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes the ablation table as CSV with a fixed column order.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<(), TrainError> {
    let io = |e: std::io::Error| TrainError::Io(path.display().to_string(), e);
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_variants_under_defaults() {
        let v = ablation_variants(&TrainConfig::default());
        assert_eq!(v.len(), 7);
        let caps: Vec<usize> = v.iter().map(|(_, c)| c.history_cap()).collect();
        assert_eq!(caps, vec![10, 10, 10, 10, 0, 20, 30]);
        assert!(v
            .iter()
            .all(|(_, c)| c.seed == 0 && c.split == [0.8, 0.1, 0.1]));
    }

    #[test]
    fn batch_size_one_rejected() {
        let c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
