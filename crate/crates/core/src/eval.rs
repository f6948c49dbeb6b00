//! Compatibility-prediction and fill-in-the-blank evaluation, bootstrap
//! intervals and embedding export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::model::{HatModel, ModelError};
use crate::numerics::Tensor;
use crate::rng::{substream, Rng};
use crate::sampling::{
    build_cp_hard_pairs, build_fitb_questions, frozen_histories, make_random_negative,
    resolve_candidates, resolve_partial, FitbMode, FitbQuestion, SamplingError,
};

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("AUC needs at least one positive and one negative score")]
    EmptySide,
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("no examples for {0}")]
    NoExamples(Task),
    #[error("bootstrap needs at least one resample and a level in (0, 1)")]
    BadBootstrap,
    #[error("unknown task {0:?}; valid tasks: cp_random, cp_hard, fitb_random, fitb_hard")]
    UnknownTask(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CpRandom,
    CpHard,
    FitbRandom,
    FitbHard,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::CpRandom,
        Task::CpHard,
        Task::FitbRandom,
        Task::FitbHard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::CpRandom => "cp_random",
            Task::CpHard => "cp_hard",
            Task::FitbRandom => "fitb_random",
            Task::FitbHard => "fitb_hard",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| EvalError::UnknownTask(s.to_string()))
    }
}

/// Area under the ROC curve: the fraction of (positive, negative) pairs in
/// which the positive scores higher, ties counting one half.
///
/// Computed exactly by sorting, as `(2·wins + ties) / (2·P·N)`.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64, EvalError> {
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::EmptySide);
    }
    let mut all: Vec<(f64, bool)> = Vec::with_capacity(pos.len() + neg.len());
    for &s in pos {
        all.push((s, true));
    }
    for &s in neg {
        all.push((s, false));
    }
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(EvalError::NonFiniteScore);
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut wins, mut ties) = (0u128, 0u128);
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins += p * neg_below;
        ties += p * n;
        neg_below += n;
        i = j;
    }
    let denom = 2 * pos.len() as u128 * neg.len() as u128;
    Ok((2 * wins + ties) as f64 / denom as f64)
}

/// Per-example outcomes for the bootstrap.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcomes {
    /// Correct / incorrect per question.
    Accuracy(Vec<bool>),
    /// Score and label (true = positive) per example.
    Auc(Vec<(f64, bool)>),
}

impl Outcomes {
    pub fn len(&self) -> usize {
        match self {
            Outcomes::Accuracy(v) => v.len(),
            Outcomes::Auc(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn statistic(&self) -> Result<f64, EvalError> {
        match self {
            Outcomes::Accuracy(v) => {
                if v.is_empty() {
                    return Err(EvalError::EmptySide);
                }
                Ok(v.iter().filter(|&&c| c).count() as f64 / v.len() as f64)
            }
            Outcomes::Auc(v) => {
                let pos: Vec<f64> = v.iter().filter(|e| e.1).map(|e| e.0).collect();
                let neg: Vec<f64> = v.iter().filter(|e| !e.1).map(|e| e.0).collect();
                auc(&pos, &neg)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    /// Resamples drawn again because they held a single class.
    pub redraws: usize,
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// AUC from per-example multiplicities, sweeping examples sorted by score.
/// `order` sorts `outcomes` ascending by score. Returns `None` when one class
/// is absent.
fn weighted_auc(outcomes: &[(f64, bool)], order: &[usize], counts: &[u32]) -> Option<f64> {
    let (mut wins, mut ties, mut neg_below) = (0u128, 0u128, 0u128);
    let (mut total_p, mut total_n) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let s = outcomes[order[i]].0;
        let (mut p, mut n) = (0u128, 0u128);
        let mut j = i;
        while j < order.len() && outcomes[order[j]].0 == s {
            let e = order[j];
            if outcomes[e].1 {
                p += counts[e] as u128;
            } else {
                n += counts[e] as u128;
            }
            j += 1;
        }
        wins += p * neg_below;
        ties += p * n;
        neg_below += n;
        total_p += p;
        total_n += n;
        i = j;
    }
    if total_p == 0 || total_n == 0 {
        return None;
    }
    Some((2 * wins + ties) as f64 / (2 * total_p * total_n) as f64)
}

/// Percentile bootstrap interval of the outcomes' statistic. Examples are
/// resampled with replacement; AUC resamples holding a single class are
/// drawn again and counted.
pub fn bootstrap_ci(
    outcomes: &Outcomes,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Interval, EvalError> {
    if n_resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(EvalError::BadBootstrap);
    }
    let n = outcomes.len();
    if n == 0 {
        return Err(EvalError::EmptySide);
    }
    let mut rng = substream(seed, "bootstrap");
    let mut stats = Vec::with_capacity(n_resamples);
    let mut counts = vec![0u32; n];
    let mut redraws = 0;
    match outcomes {
        Outcomes::Accuracy(v) => {
            for _ in 0..n_resamples {
                let hits = (0..n).filter(|_| v[rng.gen_range(0..n)]).count();
                stats.push(hits as f64 / n as f64);
            }
        }
        Outcomes::Auc(v) => {
            if v.iter().any(|e| e.0.is_nan()) {
                return Err(EvalError::NonFiniteScore);
            }
            let has_both = v.iter().any(|e| e.1) && v.iter().any(|e| !e.1);
            if !has_both {
                return Err(EvalError::EmptySide);
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| v[a].0.total_cmp(&v[b].0));
            while stats.len() < n_resamples {
                counts.iter_mut().for_each(|c| *c = 0);
                for _ in 0..n {
                    counts[rng.gen_range(0..n)] += 1;
                }
                match weighted_auc(v, &order, &counts) {
                    Some(a) => stats.push(a),
                    None => redraws += 1,
                }
            }
        }
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Interval {
        lower: percentile(&stats, tail),
        upper: percentile(&stats, 1.0 - tail),
        redraws,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    /// `auc` or `accuracy`.
    pub metric: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub point_in_ci: bool,
    pub level: f64,
    pub n_examples: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub seed: u64,
    pub resamples: usize,
    pub redraws: usize,
    pub max_history: usize,
    /// Shoppers scored without history.
    pub empty_history_shoppers: usize,
    /// FITB questions whose best score was shared by several candidates.
    pub ties: usize,
    /// Hard FITB questions whose category was too small.
    pub fitb_fallbacks: usize,
}

/// Scores behind a report, kept for tests and diagnostics.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub outcomes: Outcomes,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub max_history: usize,
    pub seed: u64,
    pub resamples: usize,
    pub level: f64,
}

impl EvalOptions {
    pub fn new(max_history: usize, seed: u64) -> Self {
        EvalOptions {
            max_history,
            seed,
            resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
        }
    }
}

fn all_embeddings(model: &HatModel, ds: &Dataset) -> Result<Tensor, EvalError> {
    let sets: Vec<&[usize]> = ds.outfits().iter().map(|o| o.items.as_slice()).collect();
    Ok(model.embed_item_sets(ds, &sets)?)
}

fn finish(
    task: Task,
    outcomes: Outcomes,
    opts: &EvalOptions,
    extra: impl FnOnce(&mut EvalReport),
) -> Result<EvalOutput, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::NoExamples(task));
    }
    let point = outcomes.statistic()?;
    let ci = bootstrap_ci(&outcomes, opts.resamples, opts.level, opts.seed)?;
    let (n_positive, n_negative, metric) = match &outcomes {
        Outcomes::Auc(v) => {
            let p = v.iter().filter(|e| e.1).count();
            (p, v.len() - p, "auc")
        }
        Outcomes::Accuracy(v) => (v.len(), 0, "accuracy"),
    };
    let mut report = EvalReport {
        task,
        metric: metric.into(),
        point,
        lower: ci.lower,
        upper: ci.upper,
        point_in_ci: ci.lower <= point && point <= ci.upper,
        level: opts.level,
        n_examples: outcomes.len(),
        n_positive,
        n_negative,
        seed: opts.seed,
        resamples: opts.resamples,
        redraws: ci.redraws,
        max_history: opts.max_history,
        empty_history_shoppers: 0,
        ties: 0,
        fitb_fallbacks: 0,
    };
    extra(&mut report);
    Ok(EvalOutput { report, outcomes })
}

fn count_empty(histories: &[Vec<usize>], shoppers: impl Iterator<Item = usize>) -> usize {
    let mut seen: Vec<usize> = shoppers.filter(|&s| histories[s].is_empty()).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// CP-Random or CP-Hard AUC on the test split. Every score uses the
/// evaluated shopper's frozen train history.
pub fn eval_cp(
    model: &HatModel,
    ds: &Dataset,
    task: Task,
    opts: &EvalOptions,
) -> Result<EvalOutput, EvalError> {
    let scores = cp_scores(model, ds, task, opts.max_history, opts.seed, Split::Test)?;
    let histories = frozen_histories(ds, opts.max_history, opts.seed);
    let empty = count_empty(
        &histories,
        ds.outfits_in(Split::Test).into_iter().map(|o| ds.owner(o)),
    );
    finish(task, Outcomes::Auc(scores), opts, |r| {
        r.empty_history_shoppers = empty
    })
}

/// Scored (score, is_positive) examples for a CP task on `split`.
pub fn cp_scores(
    model: &HatModel,
    ds: &Dataset,
    task: Task,
    max_history: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<(f64, bool)>, EvalError> {
    let histories = frozen_histories(ds, max_history, seed);
    let bank = all_embeddings(model, ds)?;
    let positives = ds.outfits_in(split);
    if positives.is_empty() {
        return Err(EvalError::NoExamples(task));
    }
    let d = model.config.d;
    let mut targets = Vec::new();
    let mut hist: Vec<&[usize]> = Vec::new();
    let mut labels = Vec::new();
    for &o in &positives {
        targets.extend_from_slice(bank.row(o));
        hist.push(&histories[ds.owner(o)]);
        labels.push(true);
    }
    match task {
        Task::CpRandom => {
            let mut rng = substream(seed, "cp_random");
            let negs: Vec<Vec<usize>> = positives
                .iter()
                .map(|&o| {
                    make_random_negative(ds.outfit(o), ds, &mut rng)
                        .outfit
                        .items
                })
                .collect();
            let sets: Vec<&[usize]> = negs.iter().map(Vec::as_slice).collect();
            let e = model.embed_item_sets(ds, &sets)?;
            targets.extend_from_slice(e.data());
            for &o in &positives {
                hist.push(&histories[ds.owner(o)]);
                labels.push(false);
            }
        }
        Task::CpHard => {
            let pairs = build_cp_hard_pairs(ds, split);
            if pairs.is_empty() {
                return Err(EvalError::NoExamples(task));
            }
            for p in &pairs {
                let o = ds
                    .outfit_by_id(&p.outfit_id)
                    .expect("pair built from dataset");
                let s = ds
                    .shopper_by_id(&p.shopper_id)
                    .expect("pair built from dataset");
                targets.extend_from_slice(bank.row(o));
                hist.push(&histories[s]);
                labels.push(false);
            }
        }
        _ => unreachable!("not a CP task"),
    }
    let n = labels.len();
    let t = Tensor::from_vec(n, d, targets);
    let scores = model.score_embeddings(&t, &hist, &bank)?;
    Ok(scores.into_iter().zip(labels).collect())
}

/// Index of the highest score, earliest on ties, and whether it was tied.
pub fn argmax_lowest(scores: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    let tied = scores.iter().filter(|&&s| s == scores[best]).count() > 1;
    (best, tied)
}

/// FITB accuracy over questions, each candidate completing the partial
/// outfit and scored under the shopper's frozen history.
pub fn eval_fitb_questions(
    model: &HatModel,
    ds: &Dataset,
    task: Task,
    questions: &[FitbQuestion],
    opts: &EvalOptions,
) -> Result<EvalOutput, EvalError> {
    let histories = frozen_histories(ds, opts.max_history, opts.seed);
    let bank = all_embeddings(model, ds)?;
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(4 * questions.len());
    let mut hist: Vec<&[usize]> = Vec::with_capacity(sets.capacity());
    let mut owners = Vec::with_capacity(questions.len());
    for q in questions {
        let s = ds
            .shopper_by_id(&q.shopper_id)
            .ok_or_else(|| SamplingError::UnknownId {
                kind: "shopper",
                id: q.shopper_id.clone(),
            })?;
        owners.push(s);
        let partial = resolve_partial(q, ds)?;
        for c in resolve_candidates(q, ds)? {
            let mut items = partial.clone();
            items.insert(q.masked_position.min(items.len()), c);
            sets.push(items);
            hist.push(&histories[s]);
        }
    }
    let refs: Vec<&[usize]> = sets.iter().map(Vec::as_slice).collect();
    let e = model.embed_item_sets(ds, &refs)?;
    let scores = model.score_embeddings(&e, &hist, &bank)?;
    let mut ties = 0;
    let correct: Vec<bool> = questions
        .iter()
        .enumerate()
        .map(|(j, q)| {
            let n = q.distractor_item_ids.len() + 1;
            let (best, tied) = argmax_lowest(&scores[j * n..(j + 1) * n]);
            ties += tied as usize;
            best == q.answer_position
        })
        .collect();
    let empty = count_empty(&histories, owners.into_iter());
    finish(task, Outcomes::Accuracy(correct), opts, |r| {
        r.ties = ties;
        r.empty_history_shoppers = empty;
    })
}

/// FITB-Random or FITB-Hard accuracy on the test split.
pub fn eval_fitb(
    model: &HatModel,
    ds: &Dataset,
    task: Task,
    opts: &EvalOptions,
) -> Result<EvalOutput, EvalError> {
    let mode = match task {
        Task::FitbRandom => FitbMode::Random,
        Task::FitbHard => FitbMode::Hard,
        _ => unreachable!("not a FITB task"),
    };
    let mut rng: Rng = substream(opts.seed, "fitb");
    let (questions, stats) = build_fitb_questions(ds, Split::Test, mode, &mut rng)?;
    let mut out = eval_fitb_questions(model, ds, task, &questions, opts)?;
    out.report.fitb_fallbacks = stats.hard_fallbacks;
    Ok(out)
}

pub fn evaluate(
    model: &HatModel,
    ds: &Dataset,
    task: Task,
    opts: &EvalOptions,
) -> Result<EvalOutput, EvalError> {
    match task {
        Task::CpRandom | Task::CpHard => eval_cp(model, ds, task, opts),
        Task::FitbRandom | Task::FitbHard => eval_fitb(model, ds, task, opts),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub split: Split,
    pub dim: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub outfit_id: String,
    pub shopper_id: String,
    pub embedding: Vec<f64>,
}

/// Writes a header line followed by one record per outfit in `split`.
pub fn export_embeddings(
    model: &HatModel,
    ds: &Dataset,
    split: Split,
    path: &Path,
) -> Result<Vec<EmbeddingRecord>, EvalError> {
    let outfits = ds.outfits_in(split);
    let sets: Vec<&[usize]> = outfits
        .iter()
        .map(|&o| ds.outfit(o).items.as_slice())
        .collect();
    let e = model.embed_item_sets(ds, &sets)?;
    let records: Vec<EmbeddingRecord> = outfits
        .iter()
        .enumerate()
        .map(|(j, &o)| EmbeddingRecord {
            outfit_id: ds.outfit(o).outfit_id.clone(),
            shopper_id: ds.outfit(o).shopper_id.clone(),
            embedding: e.row(j).to_vec(),
        })
        .collect();
    let io = |e: std::io::Error| EvalError::Io(path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = EmbeddingHeader {
        split,
        dim: model.config.d,
        count: records.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for r in &records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(records)
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingHeader, Vec<EmbeddingRecord>), EvalError> {
    let io = |e: std::io::Error| EvalError::Io(path.display().to_string(), e);
    let mut lines = BufReader::new(File::open(path).map_err(io)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| {
            io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "missing header",
            ))
        })?
        .map_err(io)?;
    let header: EmbeddingHeader = serde_json::from_str(&first).map_err(|e| io(e.into()))?;
    let mut records = Vec::with_capacity(header.count);
    for line in lines {
        let line = line.map_err(io)?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).map_err(|e| io(e.into()))?);
        }
    }
    Ok((header, records))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Mean cosine similarity over same-shopper pairs minus the mean over
/// different-shopper pairs.
pub fn shopper_cosine_gap(records: &[EmbeddingRecord]) -> Option<f64> {
    shopper_cosine_means(records).map(|(intra, inter)| intra - inter)
}

/// Mean cosine similarity over same-shopper and over different-shopper
/// pairs, or `None` when either kind of pair is missing.
pub fn shopper_cosine_means(records: &[EmbeddingRecord]) -> Option<(f64, f64)> {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..records.len() {
        for j in (i + 1)..records.len() {
            let c = cosine(&records[i].embedding, &records[j].embedding);
            if records[i].shopper_id == records[j].shopper_id {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    (ni > 0 && nx > 0).then(|| (intra / ni as f64, inter / nx as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.6], &[0.6]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.4], &[0.6, 0.2]).unwrap(), 0.75);
        assert!(matches!(auc(&[], &[0.1]), Err(EvalError::EmptySide)));
    }

    #[test]
    fn constant_outcomes_give_zero_width() {
        let ci = bootstrap_ci(&Outcomes::Accuracy(vec![true; 30]), 200, 0.95, 1).unwrap();
        assert_eq!((ci.lower, ci.upper), (1.0, 1.0));
    }

    #[test]
    fn single_resample_collapses_interval() {
        let o = Outcomes::Accuracy((0..25).map(|i| i % 3 == 0).collect());
        let ci = bootstrap_ci(&o, 1, 0.95, 9).unwrap();
        assert_eq!(ci.lower, ci.upper);
    }

    #[test]
    fn degenerate_auc_resamples_are_redrawn() {
        let o = Outcomes::Auc(vec![(0.9, true), (0.1, false)]);
        let ci = bootstrap_ci(&o, 500, 0.95, 2).unwrap();
        assert!(ci.redraws > 0);
        assert_eq!((ci.lower, ci.upper), (1.0, 1.0));
    }

    #[test]
    fn weighted_sweep_matches_expanded_auc() {
        let v: Vec<(f64, bool)> = vec![
            (0.3, true),
            (0.3, false),
            (0.7, true),
            (0.1, false),
            (0.5, false),
        ];
        let counts = [2u32, 1, 3, 0, 2];
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].0.total_cmp(&v[b].0));
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (e, &c) in v.iter().zip(&counts) {
            for _ in 0..c {
                if e.1 {
                    pos.push(e.0)
                } else {
                    neg.push(e.0)
                }
            }
        }
        assert_eq!(
            weighted_auc(&v, &order, &counts).unwrap(),
            auc(&pos, &neg).unwrap()
        );
    }

    #[test]
    fn unknown_task_lists_valid_ones() {
        let err = "cp".parse::<Task>().unwrap_err().to_string();
        for t in Task::ALL {
            assert!(err.contains(t.name()));
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_lowest(&[0.2, 0.5, 0.5, 0.1]), (1, true));
        assert_eq!(argmax_lowest(&[0.9, 0.5]), (0, false));
    }

    #[test]
    fn cosine_gap_of_two_clusters() {
        let r = |s: &str, e: Vec<f64>| EmbeddingRecord {
            outfit_id: String::new(),
            shopper_id: s.into(),
            embedding: e,
        };
        let recs = vec![
            r("a", vec![1.0, 0.0]),
            r("a", vec![1.0, 0.1]),
            r("b", vec![0.0, 1.0]),
            r("b", vec![0.1, 1.0]),
        ];
        // intra ≈ 0.995, inter ≈ 0.099
        assert!((shopper_cosine_gap(&recs).unwrap() - 0.896).abs() < 1e-3);
    }
}
