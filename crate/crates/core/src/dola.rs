//! DoLa contrastive decoding: early-exit distributions per layer,
//! JSD-maximizing premature-layer selection, adaptive plausibility masking,
//! and the contrastive score vector.
//!
//! Early-exit states pass through the final normalization before the
//! vocabulary head (logit-lens convention); without it premature-layer
//! logits are scale-incommensurate with the mature layer.

use crate::error::{Error, Result};
use crate::lm::{LayerTapRecord, TransformerWeights};
use crate::math::softmax;
use std::collections::BTreeMap;

/// Masked scores are handed to the epinet with -inf encoded as this
/// sentinel so downstream logit addition stays finite.
pub const MASKED_LOGIT_SENTINEL: f64 = -1e9;

/// Floor for premature-layer probabilities inside the log-ratio.
const PREMATURE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DolaConfig {
    /// Candidate premature layers J; each 1 <= j < mature_layer.
    pub candidate_layers: Vec<usize>,
    /// Adaptive plausibility threshold for the V_head mask.
    pub alpha: f64,
    /// Mature layer N (the final layer).
    pub mature_layer: usize,
}

impl DolaConfig {
    /// Default candidates: every even layer index in [2, N-2]; if that
    /// range is empty (very shallow models) every layer below N.
    pub fn default_for(n_layers: usize) -> Self {
        let mut candidate_layers: Vec<usize> =
            (2..=n_layers.saturating_sub(2)).filter(|j| j % 2 == 0).collect();
        if candidate_layers.is_empty() {
            candidate_layers = (1..n_layers).collect();
        }
        Self {
            candidate_layers,
            alpha: 0.1,
            mature_layer: n_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidate_layers.is_empty() {
            return Err(Error::InvalidConfig("candidate_layers must be non-empty".into()));
        }
        for &j in &self.candidate_layers {
            if j == 0 || j >= self.mature_layer {
                return Err(Error::InvalidConfig(format!(
                    "candidate layer {j} outside 1..{}",
                    self.mature_layer
                )));
            }
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in (0,1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// A probability distribution over the vocabulary: nonnegative, sums to 1
/// within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for &v in &values {
            if !(v >= 0.0) {
                return Err(Error::Numeric(format!("negative or NaN probability {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    /// For internal paths whose construction guarantees validity.
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|&v| v >= 0.0));
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Everything one DoLa step records: the chosen premature layer, both
/// early-exit distributions, the plausibility mask, the contrastive
/// scores, and the resulting next-token distribution.
#[derive(Debug, Clone)]
pub struct DolaResult {
    pub premature_index: usize,
    pub q_mature: ProbVector,
    pub q_premature: ProbVector,
    pub head_mask: Vec<bool>,
    /// log q_N/q_M on the mask, -inf elsewhere.
    pub contrastive_scores: Vec<f64>,
    pub p_hat: ProbVector,
    /// contrastive_scores with -inf replaced by the finite sentinel;
    /// this is the base-net logit vector the epinet adds to.
    pub dola_logits: Vec<f64>,
}

/// softmax(head(final_norm(h_j))) — the early-exit distribution of any
/// residual-stream state under the shared vocabulary head.
pub fn early_exit_distribution(h: &[f64], weights: &TransformerWeights) -> Result<ProbVector> {
    let logits = weights.project_to_vocab(h)?;
    Ok(ProbVector::from_normalized(softmax(&logits)))
}

/// Jensen-Shannon divergence in nats; symmetric, in [0, ln 2].
/// Uses the convention 0·log(0/x) = 0.
pub fn jsd(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "jsd over different supports: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / mi).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / mi).ln();
        }
    }
    // clamp tiny negative rounding residue
    Ok(acc.max(0.0))
}

/// argmax_j JSD(q_mature || q_j); ties broken by the smallest layer index.
pub fn select_premature_layer(
    q_mature: &ProbVector,
    candidates: &BTreeMap<usize, ProbVector>,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate premature layers".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (&layer, dist) in candidates {
        let d = jsd(q_mature, dist)?;
        match best {
            // strict > keeps the smallest index on ties (BTreeMap iterates ascending)
            Some((_, bd)) if d <= bd => {}
            _ => best = Some((layer, d)),
        }
    }
    Ok(best.expect("non-empty candidates").0)
}

/// V_head membership: true where q_mature[w] >= alpha · max(q_mature).
pub fn head_mask(q_mature: &ProbVector, alpha: f64) -> Result<Vec<bool>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must be in (0,1], got {alpha}")));
    }
    let max = q_mature
        .as_slice()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = alpha * max;
    Ok(q_mature.as_slice().iter().map(|&v| v >= threshold).collect())
}

/// Contrastive scores F and the resulting distribution p_hat.
/// F[w] = log(q_mature[w]/q_premature[w]) on the mask, -inf elsewhere;
/// p_hat = softmax(F), exactly zero off the mask.
pub fn contrastive_scores(
    q_mature: &ProbVector,
    q_premature: &ProbVector,
    mask: &[bool],
) -> Result<(Vec<f64>, ProbVector)> {
    if q_mature.len() != q_premature.len() || q_mature.len() != mask.len() {
        return Err(Error::Shape("contrastive_scores length mismatch".into()));
    }
    let scores: Vec<f64> = mask
        .iter()
        .zip(q_mature.as_slice())
        .zip(q_premature.as_slice())
        .map(|((&keep, &qn), &qm)| {
            if keep {
                (qn / qm.max(PREMATURE_FLOOR)).ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let p_hat = ProbVector::from_normalized(softmax(&scores));
    Ok((scores, p_hat))
}

/// One full DoLa step at position `t` of a tap record.
pub fn dola_step(
    taps: &LayerTapRecord,
    t: usize,
    cfg: &DolaConfig,
    weights: &TransformerWeights,
) -> Result<DolaResult> {
    cfg.validate()?;
    if cfg.mature_layer > taps.n_layers {
        return Err(Error::InvalidConfig(format!(
            "mature layer {} exceeds recorded layers {}",
            cfg.mature_layer, taps.n_layers
        )));
    }
    let q_mature = early_exit_distribution(taps.hidden(t, cfg.mature_layer), weights)?;
    let mut candidates = BTreeMap::new();
    for &j in &cfg.candidate_layers {
        candidates.insert(j, early_exit_distribution(taps.hidden(t, j), weights)?);
    }
    let premature_index = select_premature_layer(&q_mature, &candidates)?;
    let q_premature = candidates.remove(&premature_index).expect("selected layer");
    let mask = head_mask(&q_mature, cfg.alpha)?;
    let (contrastive, p_hat) = contrastive_scores(&q_mature, &q_premature, &mask)?;
    let dola_logits = contrastive
        .iter()
        .map(|&v| if v == f64::NEG_INFINITY { MASKED_LOGIT_SENTINEL } else { v })
        .collect();
    Ok(DolaResult {
        premature_index,
        q_mature,
        q_premature,
        head_mask: mask,
        contrastive_scores: contrastive,
        p_hat,
        dola_logits,
    })
}
