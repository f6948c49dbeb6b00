//! The history-aware transformer: item adapter, bottom outfit encoder with a
//! learned pooling query, top history encoder and score head.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::numerics::{
    segments_from_lengths, Checkpoint, NumericsError, ParamId, ParamStore, Segment, Tape, Tensor,
    Var,
};
use crate::rng::{substream, Rng};
use crate::sampling::TrainBatch;

const LN_EPS: f64 = 1e-5;
/// Outfits per bottom-encoder pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("embedding width mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("history of {got} outfits exceeds max_history {max}")]
    HistoryTooLong { got: usize, max: usize },
    #[error("empty outfit")]
    EmptyOutfit,
}

/// Divisor applied to the pooling logits `W·Zᵀ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolScale {
    D,
    SqrtD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HatConfig {
    pub d: usize,
    pub bottom_layers: usize,
    pub bottom_heads: usize,
    pub top_layers: usize,
    pub top_heads: usize,
    pub ff_mult: usize,
    pub adapter_hidden: usize,
    pub max_history: usize,
    pub pool_scale: PoolScale,
}

impl Default for HatConfig {
    fn default() -> Self {
        HatConfig {
            d: 64,
            bottom_layers: 2,
            bottom_heads: 4,
            top_layers: 2,
            top_heads: 4,
            ff_mult: 4,
            adapter_hidden: 64,
            max_history: 10,
            pool_scale: PoolScale::D,
        }
    }
}

impl HatConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.ff_mult == 0 || self.adapter_hidden == 0 {
            return Err(ModelError::Config(
                "d, ff_mult and adapter_hidden must be positive".into(),
            ));
        }
        for (name, h) in [
            ("bottom_heads", self.bottom_heads),
            ("top_heads", self.top_heads),
        ] {
            if h == 0 || !self.d.is_multiple_of(h) {
                return Err(ModelError::Config(format!(
                    "d = {} is not divisible by {name} = {h}",
                    self.d
                )));
            }
        }
        Ok(())
    }

    fn pool_divisor(&self) -> f64 {
        match self.pool_scale {
            PoolScale::D => self.d as f64,
            PoolScale::SqrtD => (self.d as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderIds {
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    ad_w1: ParamId,
    ad_b1: ParamId,
    ad_w2: ParamId,
    ad_b2: ParamId,
    bottom: EncoderIds,
    pool_w: ParamId,
    marker: ParamId,
    top: EncoderIds,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

#[derive(Clone, Copy)]
struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct EncoderVars {
    layers: Vec<LayerVars>,
    lnf_g: Var,
    lnf_b: Var,
    heads: usize,
}

/// Parameters bound onto one tape.
struct Bound {
    ad_w1: Var,
    ad_b1: Var,
    ad_w2: Var,
    ad_b2: Var,
    bottom: EncoderVars,
    pool_w: Var,
    marker: Var,
    top: EncoderVars,
    head_w1: Var,
    head_b1: Var,
    head_w2: Var,
    head_b2: Var,
}

/// Bottom-level result for one outfit.
#[derive(Clone, Debug, PartialEq)]
pub struct OutfitEncoding {
    /// Outfit embedding, length d.
    pub e: Vec<f64>,
    /// Attention weight per item; sums to 1.
    pub a: Vec<f64>,
    /// Encoded item rows, N × d.
    pub z: Tensor,
}

/// Tape handles for a set of outfits encoded together.
#[derive(Clone, Debug)]
pub struct EncodedOutfits {
    /// Item encodings, stacked, T × d.
    pub z: Var,
    /// Attention weights, T × 1.
    pub a: Var,
    /// One embedding per outfit, S × d.
    pub e: Var,
    pub segments: Rc<[Segment]>,
}

/// Everything the losses need from one training batch.
#[derive(Clone, Debug)]
pub struct FullOutputs {
    pub p_pos: Var,
    pub p_neg: Var,
    pub p_weak: Var,
    /// Attention weight of each positive at its weak negative's swapped
    /// position, K × 1.
    pub a_swapped: Var,
    /// Embeddings of the distinct history outfits in the batch, H × d.
    pub history_e: Var,
    /// Shopper label of each row of `history_e`.
    pub history_shoppers: Vec<String>,
    /// Dataset index of each row of `history_e`.
    pub history_outfits: Vec<usize>,
}

/// How the dataset was split for training, so evaluation can rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub fractions: [f64; 3],
    pub seed: u64,
}

/// JSON stored in a checkpoint's metadata field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: HatConfig,
    pub image_dim: usize,
    pub title_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRecord>,
}

impl CheckpointMeta {
    pub fn parse(ck: &Checkpoint) -> Result<Self, ModelError> {
        serde_json::from_str(&ck.metadata)
            .map_err(|e| ModelError::Config(format!("checkpoint metadata: {e}")))
    }
}

#[derive(Clone, Debug)]
pub struct HatModel {
    pub config: HatConfig,
    image_dim: usize,
    title_dim: usize,
    pub store: ParamStore,
    ids: Ids,
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-b..b)).collect(),
    )
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, var: f64) -> Tensor {
    let n = Normal::new(0.0, var.sqrt()).expect("finite variance");
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| n.sample(rng)).collect(),
    )
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn add(&mut self, group: &str, name: &str, t: Tensor) -> Result<ParamId, ModelError> {
        Ok(self.store.add(group, name, t)?)
    }

    fn uniform(
        &mut self,
        group: &str,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
    ) -> Result<ParamId, ModelError> {
        let t = uniform(self.rng, rows, cols, fan_in);
        self.add(group, name, t)
    }

    fn gaussian(
        &mut self,
        group: &str,
        name: &str,
        cols: usize,
        var: f64,
    ) -> Result<ParamId, ModelError> {
        let t = gaussian(self.rng, 1, cols, var);
        self.add(group, name, t)
    }

    fn linear(
        &mut self,
        group: &str,
        name: &str,
        fan_in: usize,
        out: usize,
    ) -> Result<(ParamId, ParamId), ModelError> {
        let w = uniform(self.rng, fan_in, out, fan_in);
        let b = uniform(self.rng, 1, out, fan_in);
        Ok((
            self.add(group, &format!("{name}.w"), w)?,
            self.add(group, &format!("{name}.b"), b)?,
        ))
    }

    fn norm(
        &mut self,
        group: &str,
        name: &str,
        d: usize,
    ) -> Result<(ParamId, ParamId), ModelError> {
        Ok((
            self.add(group, &format!("{name}.g"), Tensor::filled(1, d, 1.0))?,
            self.add(group, &format!("{name}.b"), Tensor::zeros(1, d))?,
        ))
    }

    fn encoder(
        &mut self,
        group: &str,
        layers: usize,
        d: usize,
        ff: usize,
    ) -> Result<EncoderIds, ModelError> {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("l{l}");
            let (ln1_g, ln1_b) = self.norm(group, &format!("{p}.ln1"), d)?;
            let wq = self.uniform(group, &format!("{p}.wq"), d, d, d)?;
            let wk = self.uniform(group, &format!("{p}.wk"), d, d, d)?;
            let wv = self.uniform(group, &format!("{p}.wv"), d, d, d)?;
            let (wo, bo) = self.linear(group, &format!("{p}.wo"), d, d)?;
            let (ln2_g, ln2_b) = self.norm(group, &format!("{p}.ln2"), d)?;
            let (w1, b1) = self.linear(group, &format!("{p}.ff1"), d, ff)?;
            let (w2, b2) = self.linear(group, &format!("{p}.ff2"), ff, d)?;
            out.push(LayerIds {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let (lnf_g, lnf_b) = self.norm(group, "lnf", d)?;
        Ok(EncoderIds {
            layers: out,
            lnf_g,
            lnf_b,
        })
    }
}

fn build(
    config: &HatConfig,
    image_dim: usize,
    title_dim: usize,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<Ids, ModelError> {
    let d = config.d;
    let ff = config.ff_mult * d;
    let mut b = Builder { store, rng };
    let (ad_w1, ad_b1) = b.linear(
        "adapter",
        "fc1",
        image_dim + title_dim,
        config.adapter_hidden,
    )?;
    let (ad_w2, ad_b2) = b.linear("adapter", "fc2", config.adapter_hidden, d)?;
    let bottom = b.encoder("bottom", config.bottom_layers, d, ff)?;
    let pool_w = b.gaussian("pool", "query", d, 1.0 / d as f64)?;
    let marker = b.gaussian("top", "target_marker", d, 1.0 / d as f64)?;
    let top = b.encoder("top", config.top_layers, d, ff)?;
    let (head_w1, head_b1) = b.linear("head", "fc1", d, d)?;
    let (head_w2, head_b2) = b.linear("head", "fc2", d, 1)?;
    Ok(Ids {
        ad_w1,
        ad_b1,
        ad_w2,
        ad_b2,
        bottom,
        pool_w,
        marker,
        top,
        head_w1,
        head_b1,
        head_w2,
        head_b2,
    })
}

fn bind_encoder(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &EncoderIds,
    heads: usize,
) -> EncoderVars {
    let mut p = |id| tape.param(store, id);
    let layers = ids
        .layers
        .iter()
        .map(|l| LayerVars {
            ln1_g: p(l.ln1_g),
            ln1_b: p(l.ln1_b),
            wq: p(l.wq),
            wk: p(l.wk),
            wv: p(l.wv),
            wo: p(l.wo),
            bo: p(l.bo),
            ln2_g: p(l.ln2_g),
            ln2_b: p(l.ln2_b),
            w1: p(l.w1),
            b1: p(l.b1),
            w2: p(l.w2),
            b2: p(l.b2),
        })
        .collect();
    EncoderVars {
        layers,
        lnf_g: p(ids.lnf_g),
        lnf_b: p(ids.lnf_b),
        heads,
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// Pre-norm transformer encoder over independent segments, followed by a
/// final layer norm. No positional information.
fn run_encoder(
    tape: &mut Tape,
    enc: &EncoderVars,
    x: Var,
    segments: &Rc<[Segment]>,
) -> Result<Var, NumericsError> {
    let d = tape.shape(x).1;
    let scale = 1.0 / ((d / enc.heads) as f64).sqrt();
    let mut h = x;
    for l in &enc.layers {
        let n = tape.layer_norm(h, l.ln1_g, l.ln1_b, LN_EPS)?;
        let q = tape.matmul(n, l.wq)?;
        let k = tape.matmul(n, l.wk)?;
        let v = tape.matmul(n, l.wv)?;
        let att = tape.attention(q, k, v, segments.clone(), enc.heads, scale)?;
        let o = linear(tape, att, l.wo, l.bo)?;
        h = tape.add(h, o)?;
        let n = tape.layer_norm(h, l.ln2_g, l.ln2_b, LN_EPS)?;
        let f = linear(tape, n, l.w1, l.b1)?;
        let f = tape.gelu(f);
        let f = linear(tape, f, l.w2, l.b2)?;
        h = tape.add(h, f)?;
    }
    tape.layer_norm(h, enc.lnf_g, enc.lnf_b, LN_EPS)
}

impl HatModel {
    /// Fresh parameters drawn from the `init` substream of `seed`.
    pub fn new(
        config: HatConfig,
        image_dim: usize,
        title_dim: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let mut rng = substream(seed, "init");
        let ids = build(&config, image_dim, title_dim, &mut store, &mut rng)?;
        Ok(HatModel {
            config,
            image_dim,
            title_dim,
            store,
            ids,
        })
    }

    pub fn for_dataset(config: HatConfig, ds: &Dataset, seed: u64) -> Result<Self, ModelError> {
        Self::new(config, ds.image_dim(), ds.title_dim(), seed)
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    pub fn title_dim(&self) -> usize {
        self.title_dim
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        self.to_checkpoint_with_split(step, None)
    }

    pub fn to_checkpoint_with_split(&self, step: u64, split: Option<SplitRecord>) -> Checkpoint {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            image_dim: self.image_dim,
            title_dim: self.title_dim,
            split,
        };
        Checkpoint {
            seed: self.store.seed(),
            step,
            metadata: serde_json::to_string(&meta).expect("metadata serialises"),
            store: self.store.clone(),
        }
    }

    /// Rebuilds a model from a checkpoint, checking the parameter layout
    /// against a freshly built one.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let meta = CheckpointMeta::parse(ck)?;
        let mut model = Self::new(meta.config, meta.image_dim, meta.title_dim, ck.seed)?;
        model.store.copy_values_from(&ck.store)?;
        Ok(model)
    }

    /// Parameter groups with their scalar counts.
    pub fn group_sizes(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for p in self.store.params() {
            *m.entry(p.group.clone()).or_default() += p.value.len();
        }
        m
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        let s = &self.store;
        let ids = &self.ids;
        Bound {
            ad_w1: tape.param(s, ids.ad_w1),
            ad_b1: tape.param(s, ids.ad_b1),
            ad_w2: tape.param(s, ids.ad_w2),
            ad_b2: tape.param(s, ids.ad_b2),
            bottom: bind_encoder(tape, s, &ids.bottom, self.config.bottom_heads),
            pool_w: tape.param(s, ids.pool_w),
            marker: tape.param(s, ids.marker),
            top: bind_encoder(tape, s, &ids.top, self.config.top_heads),
            head_w1: tape.param(s, ids.head_w1),
            head_b1: tape.param(s, ids.head_b1),
            head_w2: tape.param(s, ids.head_w2),
            head_b2: tape.param(s, ids.head_b2),
        }
    }

    fn input_rows(
        &self,
        ds: &Dataset,
        items: impl Iterator<Item = usize>,
    ) -> Result<Tensor, ModelError> {
        let width = self.image_dim + self.title_dim;
        let mut data = Vec::new();
        let mut rows = 0;
        for i in items {
            let it = ds.item(i);
            if it.image_embedding.len() != self.image_dim {
                return Err(ModelError::Dim {
                    expected: self.image_dim,
                    got: it.image_embedding.len(),
                });
            }
            if it.title_embedding.len() != self.title_dim {
                return Err(ModelError::Dim {
                    expected: self.title_dim,
                    got: it.title_embedding.len(),
                });
            }
            data.extend_from_slice(&it.image_embedding);
            data.extend_from_slice(&it.title_embedding);
            rows += 1;
        }
        Ok(Tensor::from_vec(rows, width, data))
    }

    fn adapt(&self, tape: &mut Tape, b: &Bound, x: Tensor) -> Result<Var, NumericsError> {
        let x = tape.constant(x);
        let h = linear(tape, x, b.ad_w1, b.ad_b1)?;
        let h = tape.gelu(h);
        linear(tape, h, b.ad_w2, b.ad_b2)
    }

    /// Adapted embedding (length d) of a single item.
    pub fn adapt_item(&self, ds: &Dataset, item: usize) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = self.input_rows(ds, std::iter::once(item))?;
        let v = self.adapt(&mut tape, &b, x)?;
        Ok(tape.value(v).data().to_vec())
    }

    fn encode_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        ds: &Dataset,
        sets: &[&[usize]],
    ) -> Result<EncodedOutfits, ModelError> {
        if sets.iter().any(|s| s.is_empty()) {
            return Err(ModelError::EmptyOutfit);
        }
        let lengths: Vec<usize> = sets.iter().map(|s| s.len()).collect();
        let segments: Rc<[Segment]> = segments_from_lengths(&lengths).into();
        let x = self.input_rows(ds, sets.iter().flat_map(|s| s.iter().copied()))?;
        let h = self.adapt(tape, b, x)?;
        let z = run_encoder(tape, &b.bottom, h, &segments)?;
        let logits = tape.matmul_bt(z, b.pool_w)?;
        let logits = tape.scale(logits, 1.0 / self.config.pool_divisor());
        let a = tape.segment_softmax(logits, segments.clone())?;
        let e = tape.segment_weighted_sum(a, z, segments.clone())?;
        Ok(EncodedOutfits { z, a, e, segments })
    }

    /// Encodes several item sets in one pass on `tape`.
    pub fn encode_outfits_on(
        &self,
        tape: &mut Tape,
        ds: &Dataset,
        sets: &[&[usize]],
    ) -> Result<EncodedOutfits, ModelError> {
        let b = self.bind(tape);
        self.encode_on_tape(tape, &b, ds, sets)
    }

    /// Top encoder and head for a batch of sequences. `targets` are row
    /// indices into `bank`, `histories[j]` the rows of target `j`'s history.
    /// Returns the scores as an n × 1 column.
    fn score_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        bank: Var,
        targets: &[usize],
        histories: &[&[usize]],
    ) -> Result<Var, ModelError> {
        debug_assert_eq!(targets.len(), histories.len());
        let mut index = Vec::new();
        let mut lengths = Vec::with_capacity(targets.len());
        let mut is_target = Vec::new();
        for (t, h) in targets.iter().zip(histories) {
            if h.len() > self.config.max_history {
                return Err(ModelError::HistoryTooLong {
                    got: h.len(),
                    max: self.config.max_history,
                });
            }
            index.push(*t);
            is_target.push(1.0);
            for &r in h.iter() {
                index.push(r);
                is_target.push(0.0);
            }
            lengths.push(h.len() + 1);
        }
        let segments: Rc<[Segment]> = segments_from_lengths(&lengths).into();
        let starts: Rc<[usize]> = segments.iter().map(|s| s.start).collect();
        let tokens = tape.gather_rows(bank, index.into())?;
        let mask = tape.constant(Tensor::col_vector(is_target));
        let marks = tape.matmul(mask, b.marker)?;
        let tokens = tape.add(tokens, marks)?;
        let out = run_encoder(tape, &b.top, tokens, &segments)?;
        let read = tape.gather_rows(out, starts)?;
        let h = linear(tape, read, b.head_w1, b.head_b1)?;
        let h = tape.gelu(h);
        let logit = linear(tape, h, b.head_w2, b.head_b2)?;
        Ok(tape.sigmoid(logit))
    }

    /// Scores, encodings and gathered attention weights for a training batch.
    ///
    /// Rows are ordered positives, negatives, weak negatives (K each), then
    /// the distinct history outfits. Each example's three targets share its
    /// history.
    pub fn forward_full(
        &self,
        tape: &mut Tape,
        ds: &Dataset,
        batch: &TrainBatch,
    ) -> Result<FullOutputs, ModelError> {
        let k = batch.len();
        let b = self.bind(tape);
        let mut hist: Vec<usize> = batch
            .examples
            .iter()
            .flat_map(|e| e.history.iter().copied())
            .collect();
        hist.sort_unstable();
        hist.dedup();
        let row_of = |o: usize| 3 * k + hist.binary_search(&o).expect("history outfit collected");

        let mut sets: Vec<&[usize]> = Vec::with_capacity(3 * k + hist.len());
        sets.extend(batch.examples.iter().map(|e| e.positive.items.as_slice()));
        sets.extend(batch.examples.iter().map(|e| e.negative.items.as_slice()));
        sets.extend(
            batch
                .examples
                .iter()
                .map(|e| e.weak.outfit.items.as_slice()),
        );
        sets.extend(hist.iter().map(|&o| ds.outfit(o).items.as_slice()));
        let enc = self.encode_on_tape(tape, &b, ds, &sets)?;

        let hist_rows: Vec<Vec<usize>> = batch
            .examples
            .iter()
            .map(|e| e.history.iter().map(|&o| row_of(o)).collect())
            .collect();
        let targets: Vec<usize> = (0..3 * k).collect();
        let histories: Vec<&[usize]> = (0..3 * k).map(|j| hist_rows[j % k].as_slice()).collect();
        let p = self.score_on_tape(tape, &b, enc.e, &targets, &histories)?;
        let p_pos = tape.gather_rows(p, (0..k).collect())?;
        let p_neg = tape.gather_rows(p, (k..2 * k).collect())?;
        let p_weak = tape.gather_rows(p, (2 * k..3 * k).collect())?;
        let swapped: Rc<[usize]> = batch
            .examples
            .iter()
            .enumerate()
            .map(|(j, e)| enc.segments[j].start + e.swapped_index())
            .collect();
        let a_swapped = tape.gather_rows(enc.a, swapped)?;
        let history_e = if hist.is_empty() {
            tape.constant(Tensor::zeros(0, self.config.d))
        } else {
            tape.gather_rows(enc.e, (3 * k..3 * k + hist.len()).collect())?
        };
        let history_shoppers = hist
            .iter()
            .map(|&o| ds.outfit(o).shopper_id.clone())
            .collect();
        Ok(FullOutputs {
            p_pos,
            p_neg,
            p_weak,
            a_swapped,
            history_e,
            history_shoppers,
            history_outfits: hist,
        })
    }

    /// Encodes item sets, in chunks, outside any training tape.
    pub fn encode_item_sets(
        &self,
        ds: &Dataset,
        sets: &[&[usize]],
    ) -> Result<Vec<OutfitEncoding>, ModelError> {
        let mut out = Vec::with_capacity(sets.len());
        for chunk in sets.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let enc = self.encode_outfits_on(&mut tape, ds, chunk)?;
            let (z, a, e) = (tape.value(enc.z), tape.value(enc.a), tape.value(enc.e));
            for (j, s) in enc.segments.iter().enumerate() {
                let mut zr = Tensor::zeros(s.len, self.config.d);
                for r in 0..s.len {
                    zr.row_mut(r).copy_from_slice(z.row(s.start + r));
                }
                out.push(OutfitEncoding {
                    e: e.row(j).to_vec(),
                    a: a.data()[s.start..s.end()].to_vec(),
                    z: zr,
                });
            }
        }
        Ok(out)
    }

    pub fn encode_outfit(
        &self,
        ds: &Dataset,
        items: &[usize],
    ) -> Result<OutfitEncoding, ModelError> {
        Ok(self.encode_item_sets(ds, &[items])?.remove(0))
    }

    /// Outfit embeddings only, as an S × d matrix.
    pub fn embed_item_sets(&self, ds: &Dataset, sets: &[&[usize]]) -> Result<Tensor, ModelError> {
        let mut data = Vec::with_capacity(sets.len() * self.config.d);
        for chunk in sets.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let enc = self.encode_outfits_on(&mut tape, ds, chunk)?;
            data.extend_from_slice(tape.value(enc.e).data());
        }
        Ok(Tensor::from_vec(sets.len(), self.config.d, data))
    }

    /// Scores targets against histories, all given as precomputed outfit
    /// embeddings: `targets` rows are scored with the rows of `bank` listed
    /// in `histories`.
    pub fn score_embeddings(
        &self,
        targets: &Tensor,
        histories: &[&[usize]],
        bank: &Tensor,
    ) -> Result<Vec<f64>, ModelError> {
        assert_eq!(targets.rows(), histories.len());
        let d = self.config.d;
        let mut out = Vec::with_capacity(targets.rows());
        let n = targets.rows();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let mut tape = Tape::new();
            let b = self.bind(&mut tape);
            // rows: chunk targets, then only the bank rows this chunk uses
            let mut used: Vec<usize> = histories[start..end]
                .iter()
                .flat_map(|h| h.iter().copied())
                .collect();
            used.sort_unstable();
            used.dedup();
            let m = end - start;
            let mut data = Vec::with_capacity((m + used.len()) * d);
            for r in start..end {
                data.extend_from_slice(targets.row(r));
            }
            for &r in &used {
                data.extend_from_slice(bank.row(r));
            }
            let stacked = tape.constant(Tensor::from_vec(m + used.len(), d, data));
            let local: Vec<Vec<usize>> = histories[start..end]
                .iter()
                .map(|h| {
                    h.iter()
                        .map(|r| m + used.binary_search(r).expect("collected"))
                        .collect()
                })
                .collect();
            let refs: Vec<&[usize]> = local.iter().map(Vec::as_slice).collect();
            let idx: Vec<usize> = (0..m).collect();
            let p = self.score_on_tape(&mut tape, &b, stacked, &idx, &refs)?;
            out.extend_from_slice(tape.value(p).data());
            start = end;
        }
        Ok(out)
    }

    /// Compatibility probability of `target` given encoded history outfits.
    /// An empty history scores the target alone.
    pub fn score_outfit(
        &self,
        target: &OutfitEncoding,
        history: &[OutfitEncoding],
    ) -> Result<f64, ModelError> {
        let d = self.config.d;
        let t = Tensor::from_vec(1, d, target.e.clone());
        let mut bank = Vec::with_capacity(history.len() * d);
        for h in history {
            bank.extend_from_slice(&h.e);
        }
        let bank = Tensor::from_vec(history.len(), d, bank);
        let rows: Vec<usize> = (0..history.len()).collect();
        Ok(self.score_embeddings(&t, &[&rows], &bank)?[0])
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.store.lookup(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Item, OutfitRecord, ShopperRecord};

    fn tiny() -> HatConfig {
        HatConfig {
            d: 8,
            bottom_layers: 1,
            bottom_heads: 2,
            top_layers: 1,
            top_heads: 2,
            ff_mult: 2,
            adapter_hidden: 8,
            max_history: 4,
            pool_scale: PoolScale::D,
        }
    }

    fn toy() -> Dataset {
        let items = (0..4)
            .map(|i| Item {
                item_id: format!("i{i}"),
                category_id: format!("c{}", i % 2),
                image_embedding: vec![i as f64, 1.0, -0.5],
                title_embedding: vec![0.3 * i as f64, -1.0],
            })
            .collect();
        let outfits = vec![OutfitRecord {
            outfit_id: "o".into(),
            shopper_id: "s".into(),
            item_ids: vec!["i0".into(), "i1".into()],
        }];
        let shoppers = vec![ShopperRecord {
            shopper_id: "s".into(),
            outfit_ids: vec!["o".into()],
        }];
        Dataset::from_records(items, outfits, shoppers, 20).unwrap()
    }

    #[test]
    fn heads_must_divide_d() {
        let cfg = HatConfig {
            top_heads: 3,
            ..tiny()
        };
        assert!(HatModel::new(cfg, 3, 2, 0).is_err());
    }

    #[test]
    fn zero_adapter_gives_zero_vector() {
        let ds = toy();
        let mut m = HatModel::for_dataset(tiny(), &ds, 1).unwrap();
        for name in [
            "adapter.fc1.w",
            "adapter.fc1.b",
            "adapter.fc2.w",
            "adapter.fc2.b",
        ] {
            let id = m.param_id(name).unwrap();
            m.store.value_mut(id).fill(0.0);
        }
        let v = m.adapt_item(&ds, 2).unwrap();
        assert_eq!(v, vec![0.0; 8]);
    }

    #[test]
    fn singleton_outfit_takes_all_attention() {
        let ds = toy();
        let m = HatModel::for_dataset(tiny(), &ds, 1).unwrap();
        let enc = m.encode_outfit(&ds, &[3]).unwrap();
        assert_eq!(enc.a, vec![1.0]);
        assert_eq!(enc.e, enc.z.row(0).to_vec());
    }

    #[test]
    fn zero_head_scores_one_half() {
        let ds = toy();
        let mut m = HatModel::for_dataset(tiny(), &ds, 1).unwrap();
        for name in ["head.fc2.w", "head.fc2.b"] {
            let id = m.param_id(name).unwrap();
            m.store.value_mut(id).fill(0.0);
        }
        let enc = m.encode_outfit(&ds, &[0, 1]).unwrap();
        assert_eq!(m.score_outfit(&enc, &[]).unwrap(), 0.5);
    }

    #[test]
    fn history_limit_enforced() {
        let ds = toy();
        let m = HatModel::for_dataset(tiny(), &ds, 1).unwrap();
        let enc = m.encode_outfit(&ds, &[0, 1]).unwrap();
        let hist = vec![enc.clone(); 5];
        assert!(matches!(
            m.score_outfit(&enc, &hist),
            Err(ModelError::HistoryTooLong { got: 5, max: 4 })
        ));
    }

    #[test]
    fn checkpoint_round_trip_restores_scores() {
        let ds = toy();
        let m = HatModel::for_dataset(tiny(), &ds, 4).unwrap();
        let ck = m.to_checkpoint(3);
        let back = HatModel::from_checkpoint(
            &Checkpoint::read_from(&mut ck.to_bytes().as_slice()).unwrap(),
        )
        .unwrap();
        let a = m.encode_outfit(&ds, &[0, 1, 2]).unwrap();
        let b = back.encode_outfit(&ds, &[0, 1, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bottom_encoder_is_one_group() {
        let m = HatModel::new(tiny(), 3, 2, 0).unwrap();
        let groups = m.group_sizes();
        assert_eq!(
            groups.keys().cloned().collect::<Vec<_>>(),
            vec!["adapter", "bottom", "head", "pool", "top"]
        );
    }
}
