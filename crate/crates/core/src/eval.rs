//! Multiple-choice factuality scoring (MC1/MC2) for the three decoding
//! variants, plus marginal and joint log-loss over training pairs.

use crate::data::ByteTokenizer;
use crate::dola::{dola_step, DolaConfig, ProbVector};
use crate::epinet::{
    enn_predict_with_indices, sample_indices, EpinetConfig, EpinetParams, EpistemicIndex,
    TrainingPair,
};
use crate::error::{Error, Result};
use crate::lm::{LayerTapRecord, TokenSequence, TransformerWeights};
use crate::math::{log_sum_exp, softmax};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const DEFAULT_PROMPT_TEMPLATE: &str = "Q: {question}\nA: ";

/// One multiple-choice item: a question with disjoint sets of correct and
/// incorrect answers.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct McItem {
    pub question: String,
    pub correct_answers: Vec<String>,
    pub incorrect_answers: Vec<String>,
}

impl McItem {
    pub fn validate(&self) -> Result<()> {
        if self.correct_answers.is_empty() || self.incorrect_answers.is_empty() {
            return Err(Error::Data(
                "item needs at least one correct and one incorrect answer".into(),
            ));
        }
        if self
            .correct_answers
            .iter()
            .chain(&self.incorrect_answers)
            .any(|a| a.is_empty())
        {
            return Err(Error::Data("empty answer string".into()));
        }
        for c in &self.correct_answers {
            if self.incorrect_answers.contains(c) {
                return Err(Error::Data(format!(
                    "answer {c:?} listed as both correct and incorrect"
                )));
            }
        }
        Ok(())
    }
}

/// JSON array of items, TruthfulQA-MC compatible.
pub fn load_mc_dataset(path: &Path) -> Result<Vec<McItem>> {
    let text = std::fs::read_to_string(path)?;
    let items: Vec<McItem> = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if items.is_empty() {
        return Err(Error::Data("empty MC dataset".into()));
    }
    for item in &items {
        item.validate()?;
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    Baseline,
    Dola,
    DolaEnn,
}

impl VariantTag {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Self::Baseline),
            "dola" => Some(Self::Dola),
            "dola_enn" => Some(Self::DolaEnn),
            _ => None,
        }
    }

    pub fn tag_str(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Dola => "dola",
            Self::DolaEnn => "dola_enn",
        }
    }

    /// Row label used in the results table.
    pub fn display_name(&self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::Dola => "DoLa",
            Self::DolaEnn => "DoLa+ENN",
        }
    }
}

/// A decoding strategy bound to its weights. Evaluation and generation
/// only ever borrow the weights, so they stay bitwise unchanged.
pub struct DecoderVariant<'a> {
    pub tag: VariantTag,
    pub weights: &'a TransformerWeights,
    pub dola: Option<&'a DolaConfig>,
    pub epinet: Option<(&'a EpinetParams, &'a EpinetConfig)>,
}

impl<'a> DecoderVariant<'a> {
    pub fn new(
        tag: VariantTag,
        weights: &'a TransformerWeights,
        dola: Option<&'a DolaConfig>,
        epinet: Option<(&'a EpinetParams, &'a EpinetConfig)>,
    ) -> Result<Self> {
        match tag {
            VariantTag::Baseline => {}
            VariantTag::Dola => {
                if dola.is_none() {
                    return Err(Error::InvalidConfig("dola variant needs a DolaConfig".into()));
                }
            }
            VariantTag::DolaEnn => {
                if dola.is_none() {
                    return Err(Error::InvalidConfig("dola_enn variant needs a DolaConfig".into()));
                }
                let (params, _) = epinet.ok_or_else(|| {
                    Error::InvalidConfig("dola_enn variant needs an epinet checkpoint".into())
                })?;
                if params.d_model != weights.config.d_model {
                    return Err(Error::Compatibility(format!(
                        "epinet d_model {} != model d_model {}",
                        params.d_model, weights.config.d_model
                    )));
                }
            }
        }
        Ok(Self {
            tag,
            weights,
            dola,
            epinet,
        })
    }

    /// Next-token distribution this variant assigns at position `t`.
    pub fn step_distribution<R: Rng>(
        &self,
        taps: &LayerTapRecord,
        t: usize,
        rng: &mut R,
    ) -> Result<ProbVector> {
        match self.tag {
            VariantTag::Baseline => Ok(ProbVector::from_normalized(softmax(taps.logits_at(t)))),
            VariantTag::Dola => {
                let cfg = self.dola.expect("validated");
                Ok(dola_step(taps, t, cfg, self.weights)?.p_hat)
            }
            VariantTag::DolaEnn => {
                let cfg = self.dola.expect("validated");
                let (params, epi_cfg) = self.epinet.expect("validated");
                let res = dola_step(taps, t, cfg, self.weights)?;
                let d = self.weights.config.d_model;
                let mut features = Vec::with_capacity(2 * d);
                features.extend_from_slice(taps.hidden(t, res.premature_index));
                features.extend_from_slice(taps.hidden(t, cfg.mature_layer));
                let zs = sample_indices(rng, params.index_dim, epi_cfg.eval_samples);
                enn_predict_with_indices(
                    params,
                    &features,
                    &res.dola_logits,
                    epi_cfg,
                    self.weights.vocab_head(),
                    &zs,
                )
            }
        }
    }

    /// Sum over continuation tokens of log p(token | prefix) under this
    /// variant's per-step distribution. No length normalization.
    pub fn sequence_logprob<R: Rng>(
        &self,
        prompt: &str,
        continuation: &str,
        rng: &mut R,
    ) -> Result<f64> {
        let tok = ByteTokenizer;
        let mut ids = vec![ByteTokenizer::BOS];
        ids.extend(tok.encode_raw(prompt));
        let cont_start = ids.len();
        ids.extend(tok.encode_raw(continuation));
        if ids.len() > self.weights.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.weights.config.max_seq_len,
            });
        }
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let seq = TokenSequence::new_checked(ids.clone(), self.weights.config.vocab_size)?;
        let taps = self.weights.forward_with_taps(&seq)?;
        let mut lp = 0.0;
        for t in cont_start..ids.len() {
            let dist = self.step_distribution(&taps, t - 1, rng)?;
            lp += dist[ids[t] as usize].ln();
        }
        Ok(lp)
    }
}

/// Per-choice sequence log-probabilities for one item.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ChoiceLogprobs {
    pub correct: Vec<f64>,
    pub incorrect: Vec<f64>,
}

/// 1 iff the single correct answer has the strictly highest logprob;
/// ties score 0. Requires exactly one correct answer.
pub fn score_mc1(scores: &ChoiceLogprobs) -> Result<f64> {
    if scores.correct.len() != 1 {
        return Err(Error::Data(format!(
            "mc1 needs exactly one correct answer, got {}",
            scores.correct.len()
        )));
    }
    if scores.incorrect.is_empty() {
        return Err(Error::Data("mc1 needs at least one incorrect answer".into()));
    }
    let c = scores.correct[0];
    Ok(if scores.incorrect.iter().all(|&i| c > i) {
        1.0
    } else {
        0.0
    })
}

/// Normalized truth mass: (Σ exp correct) / (Σ exp all), in log space.
pub fn score_mc2(scores: &ChoiceLogprobs) -> Result<f64> {
    if scores.correct.is_empty() || scores.incorrect.is_empty() {
        return Err(Error::Data("mc2 needs correct and incorrect answers".into()));
    }
    let lse_correct = log_sum_exp(&scores.correct);
    let all: Vec<f64> = scores
        .correct
        .iter()
        .chain(&scores.incorrect)
        .cloned()
        .collect();
    let lse_all = log_sum_exp(&all);
    if lse_all == f64::NEG_INFINITY {
        // every choice has probability zero; no truth mass to assign
        return Ok(0.0);
    }
    Ok((lse_correct - lse_all).exp())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PerItemRecord {
    pub item_index: usize,
    pub approach: &'static str,
    pub question: String,
    /// Absent when the item does not have exactly one correct answer.
    pub mc1: Option<f64>,
    pub mc2: f64,
    pub logprobs: ChoiceLogprobs,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct VariantRow {
    pub approach: &'static str,
    pub model: String,
    pub mc1: f64,
    pub mc2: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalResults {
    pub rows: Vec<VariantRow>,
    pub per_item: Vec<PerItemRecord>,
}

impl EvalResults {
    /// CSV with the Approach/Model/MC1/MC2 column layout.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Approach,Model,MC1,MC2\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                row.approach, row.model, row.mc1, row.mc2
            ));
        }
        out
    }

    pub fn per_item_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.per_item {
            out.push_str(&serde_json::to_string(record).expect("serializable record"));
            out.push('\n');
        }
        out
    }
}

/// Per-item scoring options; `length_normalize` divides each choice's
/// logprob by its token count (off by default, matching the MC1
/// convention of the benchmark).
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreOptions {
    pub length_normalize: bool,
}

/// Scores one item under one variant with a caller-derived rng stream.
pub fn score_item<R: Rng>(
    variant: &DecoderVariant<'_>,
    item: &McItem,
    template: &str,
    options: ScoreOptions,
    rng: &mut R,
) -> Result<(Option<f64>, f64, ChoiceLogprobs)> {
    item.validate()?;
    let prompt = template.replace("{question}", &item.question);
    let score = |answer: &str, rng: &mut R| -> Result<f64> {
        let lp = variant.sequence_logprob(&prompt, answer, rng)?;
        Ok(if options.length_normalize {
            lp / answer.len().max(1) as f64
        } else {
            lp
        })
    };
    let mut logprobs = ChoiceLogprobs {
        correct: Vec::with_capacity(item.correct_answers.len()),
        incorrect: Vec::with_capacity(item.incorrect_answers.len()),
    };
    for answer in &item.correct_answers {
        logprobs.correct.push(score(answer, rng)?);
    }
    for answer in &item.incorrect_answers {
        logprobs.incorrect.push(score(answer, rng)?);
    }
    let mc1 = if logprobs.correct.len() == 1 {
        Some(score_mc1(&logprobs)?)
    } else {
        None
    };
    let mc2 = score_mc2(&logprobs)?;
    Ok((mc1, mc2, logprobs))
}

/// Scores every variant on every item. Per-item rng streams are derived
/// from (seed, variant index, item index) so execution order cannot
/// change results. MC1 aggregates over items with exactly one correct
/// answer; MC2 over all items.
pub fn eval_suite(
    variants: &[DecoderVariant<'_>],
    items: &[McItem],
    model_label: &str,
    template: &str,
    options: ScoreOptions,
    seed: u64,
) -> Result<EvalResults> {
    if items.is_empty() {
        return Err(Error::Data("empty MC dataset".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    let mut per_item = Vec::with_capacity(variants.len() * items.len());
    for (v_idx, variant) in variants.iter().enumerate() {
        let mut mc1_sum = 0.0;
        let mut mc1_n = 0usize;
        let mut mc2_sum = 0.0;
        for (i_idx, item) in items.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((v_idx as u64) << 32) | i_idx as u64);
            let (mc1, mc2, logprobs) = score_item(variant, item, template, options, &mut rng)?;
            if let Some(s) = mc1 {
                mc1_sum += s;
                mc1_n += 1;
            }
            mc2_sum += mc2;
            per_item.push(PerItemRecord {
                item_index: i_idx,
                approach: variant.tag.tag_str(),
                question: item.question.clone(),
                mc1,
                mc2,
                logprobs,
            });
        }
        rows.push(VariantRow {
            approach: variant.tag.display_name(),
            model: model_label.to_string(),
            mc1: if mc1_n > 0 { mc1_sum / mc1_n as f64 } else { 0.0 },
            mc2: mc2_sum / items.len() as f64,
        });
    }
    Ok(EvalResults { rows, per_item })
}

/// Per-index member distribution over a training pair; the abstraction
/// both log-loss estimators integrate over.
pub trait PairPredictor {
    fn index_dim(&self) -> usize;
    fn member_probs(&self, pair: &TrainingPair, z: &EpistemicIndex) -> Result<ProbVector>;
}

/// z-degenerate predictor: softmax of the stored DoLa logits.
pub struct DolaPairPredictor;

impl PairPredictor for DolaPairPredictor {
    fn index_dim(&self) -> usize {
        1
    }
    fn member_probs(&self, pair: &TrainingPair, _z: &EpistemicIndex) -> Result<ProbVector> {
        let logits: Vec<f64> = pair.dola_logits.iter().map(|&v| v as f64).collect();
        Ok(ProbVector::from_normalized(softmax(&logits)))
    }
}

/// ENN member: combined distribution at a fixed epistemic index.
pub struct EnnPairPredictor<'a> {
    pub params: &'a EpinetParams,
    pub cfg: &'a EpinetConfig,
    pub head: crate::lm::VocabHead<'a>,
}

impl PairPredictor for EnnPairPredictor<'_> {
    fn index_dim(&self) -> usize {
        self.params.index_dim
    }
    fn member_probs(&self, pair: &TrainingPair, z: &EpistemicIndex) -> Result<ProbVector> {
        let features: Vec<f64> = pair.features.iter().map(|&v| v as f64).collect();
        let dola: Vec<f64> = pair.dola_logits.iter().map(|&v| v as f64).collect();
        let logits = crate::epinet::epinet_forward(
            self.params,
            &features,
            z,
            self.head,
            self.cfg.prior_scale,
        )?;
        crate::epinet::combined_distribution(&dola, &logits)
    }
}

/// Mean over pairs of -log E_z[p_z(target)], estimated with `s_eval`
/// index draws taken once from `rng`.
pub fn marginal_log_loss<P: PairPredictor, R: Rng>(
    pred: &P,
    pairs: &[TrainingPair],
    s_eval: usize,
    rng: &mut R,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs".into()));
    }
    if s_eval == 0 {
        return Err(Error::InvalidConfig("s_eval must be >= 1".into()));
    }
    let zs = sample_indices(rng, pred.index_dim(), s_eval);
    let mut total = 0.0;
    for pair in pairs {
        let target = pair.target_id as usize;
        let mut p_bar = 0.0;
        for z in &zs {
            p_bar += pred.member_probs(pair, z)?[target] / s_eval as f64;
        }
        total += -p_bar.ln();
    }
    Ok(total / pairs.len() as f64)
}

/// Mean over disjoint tau-subsets of -log E_z[Π_{i ∈ subset} p_z(t_i)].
/// Subsets are a seeded-shuffle partition (natural order at tau = 1, so
/// the estimator collapses to the marginal exactly); a trailing
/// incomplete subset is dropped.
pub fn joint_log_loss<P: PairPredictor, R: Rng>(
    pred: &P,
    pairs: &[TrainingPair],
    tau: usize,
    s_eval: usize,
    rng: &mut R,
) -> Result<f64> {
    if tau == 0 {
        return Err(Error::InvalidConfig("tau must be >= 1".into()));
    }
    if pairs.len() < tau {
        return Err(Error::Data(format!(
            "need at least tau = {tau} pairs, got {}",
            pairs.len()
        )));
    }
    if s_eval == 0 {
        return Err(Error::InvalidConfig("s_eval must be >= 1".into()));
    }
    let zs = sample_indices(rng, pred.index_dim(), s_eval);
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    if tau > 1 {
        use rand::seq::SliceRandom;
        indices.shuffle(rng);
    }
    let n_subsets = pairs.len() / tau;
    let mut total = 0.0;
    for block in indices.chunks_exact(tau).take(n_subsets) {
        let mut expectation = 0.0;
        for z in &zs {
            let mut product = 1.0;
            for &i in block {
                let pair = &pairs[i];
                product *= pred.member_probs(pair, z)?[pair.target_id as usize];
            }
            expectation += product / s_eval as f64;
        }
        total += -expectation.ln();
    }
    Ok(total / n_subsets as f64)
}
