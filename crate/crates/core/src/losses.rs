//! Focal, supervised contrastive and adaptive-margin losses, built on the
//! tape so their gradients flow back into the model.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::model::FullOutputs;
use crate::numerics::{NumericsError, Tape, Tensor, Var};

/// Clamp applied to scores before any logarithm.
pub const SCORE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub c_fl: f64,
    pub c_cl: f64,
    pub c_am: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            c_fl: 1.0,
            c_cl: 1.0,
            c_am: 0.5,
            alpha: 0.5,
            gamma: 2.0,
            tau: 1.0,
            margin: 5.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("{0} weak negatives but {1} swapped-index weights")]
    MissingSwappedIndex(usize, usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::Weights(m.into()));
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return bad("margin must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return bad("gamma must be non-negative");
        }
        if !(self.c_fl >= 0.0 && self.c_cl >= 0.0 && self.c_am >= 0.0) {
            return bad("loss coefficients must be non-negative");
        }
        Ok(())
    }
}

/// Focal loss summed over a column of scores with binary labels:
/// `−α(1−p)^γ log p` for positives, `−(1−α)p^γ log(1−p)` for negatives.
pub fn focal_loss(
    tape: &mut Tape,
    p: Var,
    labels: &[bool],
    alpha: f64,
    gamma: f64,
) -> Result<Var, NumericsError> {
    let (n, c) = tape.shape(p);
    if c != 1 || n != labels.len() {
        return Err(NumericsError::Shape {
            op: "focal_loss",
            shapes: format!("{n}x{c}, {} labels", labels.len()),
        });
    }
    let p = tape.clamp(p, SCORE_EPS, 1.0 - SCORE_EPS);
    // q = probability assigned to the true class = (1 − y) + (2y − 1)·p
    let sign = tape.constant(Tensor::col_vector(
        labels.iter().map(|&y| if y { 1.0 } else { -1.0 }).collect(),
    ));
    let offset = tape.constant(Tensor::col_vector(
        labels.iter().map(|&y| if y { 0.0 } else { 1.0 }).collect(),
    ));
    let sp = tape.mul(sign, p)?;
    let q = tape.add(sp, offset)?;
    let one_minus_q = tape.scale(q, -1.0);
    let one_minus_q = tape.add_scalar(one_minus_q, 1.0);
    let modulator = tape.pow_scalar(one_minus_q, gamma);
    let logq = tape.log(q);
    let terms = tape.mul(modulator, logq)?;
    let w = Tensor::col_vector(
        labels
            .iter()
            .map(|&y| if y { -alpha } else { -(1.0 - alpha) })
            .collect(),
    );
    tape.weighted_sum(terms, w)
}

/// Supervised contrastive loss over the rows of `e`, with `labels[k]` the
/// shopper of row `k`. Rows are L2-normalised first. Anchors without a
/// positive contribute nothing; fewer than two rows gives 0.
pub fn supervised_contrastive_loss<S: AsRef<str>>(
    tape: &mut Tape,
    e: Var,
    labels: &[S],
    tau: f64,
) -> Result<Var, NumericsError> {
    let (n, _) = tape.shape(e);
    if n != labels.len() {
        return Err(NumericsError::Shape {
            op: "supervised_contrastive_loss",
            shapes: format!("{n} rows, {} labels", labels.len()),
        });
    }
    if n < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let u = tape.normalize_rows(e);
    let sim = tape.matmul_bt(u, u)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let mut not_self = vec![true; n * n];
    let mut pos_w = Tensor::zeros(n, n);
    let mut lse_w = Tensor::zeros(n, 1);
    for k in 0..n {
        not_self[k * n + k] = false;
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != k && labels[j].as_ref() == labels[k].as_ref())
            .collect();
        if positives.is_empty() {
            continue;
        }
        lse_w.set(k, 0, 1.0);
        let w = -1.0 / positives.len() as f64;
        for j in positives {
            pos_w.set(k, j, w);
        }
    }
    let mask: Rc<[bool]> = not_self.into();
    let lse = tape.log_sum_exp_rows(sim, Some(mask))?;
    let a = tape.weighted_sum(lse, lse_w)?;
    let b = tape.weighted_sum(sim, pos_w)?;
    tape.add(a, b)
}

/// `Σₖ max(0, −p_p + p_w + m·Aₖ)`. With `attention = None` every weight is 1
/// (the fixed-margin variant).
pub fn adaptive_margin_loss(
    tape: &mut Tape,
    p_pos: Var,
    p_weak: Var,
    attention: Option<Var>,
    margin: f64,
) -> Result<Var, LossError> {
    let (k, _) = tape.shape(p_weak);
    let a = match attention {
        Some(a) => {
            let (rows, _) = tape.shape(a);
            if rows != k {
                return Err(LossError::MissingSwappedIndex(k, rows));
            }
            a
        }
        None => tape.constant(Tensor::filled(k, 1, 1.0)),
    };
    let diff = tape.sub(p_weak, p_pos)?;
    let m = tape.scale(a, margin);
    let x = tape.add(diff, m)?;
    let h = tape.relu(x);
    Ok(tape.sum(h))
}

/// Which terms enter the total and how the margin is weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSwitches {
    pub disable_cl: bool,
    pub disable_am: bool,
    /// Replace the attention weight by 1 in the margin.
    pub fixed_margin: bool,
}

/// Component values of one evaluation of the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_FL")]
    pub focal: f64,
    #[serde(rename = "L_CL")]
    pub contrastive: f64,
    #[serde(rename = "L_AM")]
    pub margin: f64,
    pub total: f64,
}

/// `c_FL·L_FL + c_CL·L_CL + c_AM·L_AM`. Disabled terms are still computed
/// for logging but do not enter the total.
pub fn total_loss(
    tape: &mut Tape,
    out: &FullOutputs,
    weights: &LossWeights,
    switches: LossSwitches,
) -> Result<(Var, LossBreakdown), LossError> {
    let k = tape.shape(out.p_pos).0;
    let scores = tape.concat_rows(&[out.p_pos, out.p_neg])?;
    let labels: Vec<bool> = (0..2 * k).map(|j| j < k).collect();
    let fl = focal_loss(tape, scores, &labels, weights.alpha, weights.gamma)?;
    let cl = supervised_contrastive_loss(tape, out.history_e, &out.history_shoppers, weights.tau)?;
    let att = (!switches.fixed_margin).then_some(out.a_swapped);
    let am = adaptive_margin_loss(tape, out.p_pos, out.p_weak, att, weights.margin)?;

    let mut terms = vec![tape.scale(fl, weights.c_fl)];
    if !switches.disable_cl {
        terms.push(tape.scale(cl, weights.c_cl));
    }
    if !switches.disable_am {
        terms.push(tape.scale(am, weights.c_am));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let breakdown = LossBreakdown {
        focal: tape.value(fl).item(),
        contrastive: tape.value(cl).item(),
        margin: tape.value(am).item(),
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}
