//! Epistemic neural network over frozen-LM features: a frozen random
//! prior MLP plus a trainable learnable MLP, both conditioned on the
//! premature⊕mature hidden features and an epistemic index z, contracted
//! against z and pushed through the shared vocabulary head.

pub mod mlp;
mod train;

pub use train::{
    load_epinet_checkpoint, loss_and_grads, save_epinet_checkpoint, train_epinet, EpochRecord,
    InMemoryPairs, LossGrads, PairSource,
};

use crate::dola::ProbVector;
use crate::error::{Error, Result};
use crate::lm::VocabHead;
use crate::math::softmax;
use mlp::{Mlp, MlpCache};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const EPINET_MAGIC: [u8; 8] = *b"ENNEPI01";

/// Per-(pair,z) log-probabilities are clamped here when the target falls
/// on a masked entry, instead of producing a non-finite loss.
pub const LOG_PROB_CLAMP: f64 = -30.0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpinetConfig {
    /// Epistemic index dimension D.
    pub index_dim: usize,
    /// z samples per training step (S).
    pub train_samples: usize,
    /// z samples per prediction (S_eval).
    pub eval_samples: usize,
    /// Hidden widths of both MLPs.
    pub mlp_hidden: Vec<usize>,
    /// Prior contribution scale (beta).
    #[serde(default = "default_prior_scale")]
    pub prior_scale: f64,
    pub learning_rate: f64,
    #[serde(default = "default_lr_drop_factor")]
    pub lr_drop_factor: f64,
    pub lr_drop_threshold: f64,
    #[serde(default = "default_convergence_threshold")]
    pub convergence_threshold: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Checkpoint cadence in epochs (0 disables periodic checkpoints).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Ablation: softmax the epinet logits before summing with the DoLa
    /// logits. Off by default.
    #[serde(default)]
    pub softmax_enn_logits: bool,
    /// Ablation: average member logits instead of member probabilities
    /// at inference. Off by default (mean of probabilities).
    #[serde(default)]
    pub logit_mean_inference: bool,
    pub seed: u64,
}

fn default_prior_scale() -> f64 {
    1.0
}
fn default_lr_drop_factor() -> f64 {
    10.0
}
fn default_convergence_threshold() -> f64 {
    0.1
}
fn default_checkpoint_every() -> usize {
    25
}

impl EpinetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.index_dim == 0 {
            return Err(Error::InvalidConfig("index_dim must be >= 1".into()));
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::InvalidConfig("epistemic sample counts must be >= 1".into()));
        }
        if self.mlp_hidden.is_empty() || self.mlp_hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("mlp_hidden must be non-empty and positive".into()));
        }
        if !(self.prior_scale >= 0.0 && self.prior_scale.is_finite()) {
            return Err(Error::InvalidConfig("prior_scale must be nonnegative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.lr_drop_factor >= 1.0) {
            return Err(Error::InvalidConfig("lr_drop_factor must be >= 1".into()));
        }
        if !(self.lr_drop_threshold > 0.0) || !(self.convergence_threshold > 0.0) {
            return Err(Error::InvalidConfig("loss thresholds must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A D-dimensional standard-normal index vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EpistemicIndex {
    pub z: Vec<f64>,
}

/// One epinet training example: premature⊕mature hidden features, the
/// DoLa logit vector (with the masked-entry sentinel), and the true next
/// token. Stored at 32-bit precision; training upcasts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub features: Vec<f32>,
    pub dola_logits: Vec<f32>,
    pub target_id: u32,
}

impl TrainingPair {
    pub fn validate(&self, d_model: usize, vocab_size: usize) -> Result<()> {
        if self.features.len() != 2 * d_model {
            return Err(Error::Shape(format!(
                "pair features width {} != 2*d_model {}",
                self.features.len(),
                2 * d_model
            )));
        }
        if self.dola_logits.len() != vocab_size {
            return Err(Error::Shape("pair dola_logits width mismatch".into()));
        }
        if self.target_id as usize >= vocab_size {
            return Err(Error::VocabOutOfRange {
                id: self.target_id,
                vocab_size,
            });
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature".into()));
        }
        Ok(())
    }
}

/// Frozen prior + trainable learnable net. Both map
/// `2*d_model + D -> mlp_hidden -> d_model*D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpinetParams {
    pub index_dim: usize,
    pub d_model: usize,
    pub prior: Mlp,
    pub learnable: Mlp,
    /// Seed that generated the prior; recorded in the checkpoint so the
    /// frozen net is reconstructible.
    pub prior_seed: u64,
}

impl EpinetParams {
    pub fn input_dim(&self) -> usize {
        2 * self.d_model + self.index_dim
    }

    pub fn param_count(&self) -> usize {
        self.prior.params.len() + self.learnable.params.len()
    }

    /// Canonical bytes of the frozen prior, for freeze-contract checks.
    pub fn prior_bytes(&self) -> Vec<u8> {
        self.prior.params.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Prior from a seeded scaled normal; learnable hidden layers random,
/// learnable output layer zero so the ENN starts exactly at the prior.
pub fn init_epinet(cfg: &EpinetConfig, d_model: usize) -> Result<EpinetParams> {
    cfg.validate()?;
    if d_model == 0 {
        return Err(Error::InvalidConfig("d_model must be >= 1".into()));
    }
    let mut dims = Vec::with_capacity(cfg.mlp_hidden.len() + 2);
    dims.push(2 * d_model + cfg.index_dim);
    dims.extend_from_slice(&cfg.mlp_hidden);
    dims.push(d_model * cfg.index_dim);
    let mut prior_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut learnable_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    learnable_rng.set_stream(1);
    Ok(EpinetParams {
        index_dim: cfg.index_dim,
        d_model,
        prior: Mlp::init_random(dims.clone(), &mut prior_rng),
        learnable: Mlp::init_zero_output(dims, &mut learnable_rng),
        prior_seed: cfg.seed,
    })
}

/// `count` independent standard-normal D-vectors from the rng stream.
pub fn sample_indices<R: Rng>(rng: &mut R, index_dim: usize, count: usize) -> Vec<EpistemicIndex> {
    (0..count)
        .map(|_| EpistemicIndex {
            z: (0..index_dim).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect()
}

/// Contract an MLP output (reshaped row-major `[d_model, D]`) against z.
fn contract(out: &[f64], z: &[f64], d_model: usize) -> Vec<f64> {
    let index_dim = z.len();
    debug_assert_eq!(out.len(), d_model * index_dim);
    (0..d_model)
        .map(|d| {
            out[d * index_dim..(d + 1) * index_dim]
                .iter()
                .zip(z)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

pub(crate) struct MemberForward {
    pub logits: Vec<f64>,
    pub learnable_cache: MlpCache,
}

/// Shared forward used by the public op, the loss, and prediction.
pub(crate) fn member_forward(
    params: &EpinetParams,
    features: &[f64],
    z: &EpistemicIndex,
    head: VocabHead<'_>,
    beta: f64,
) -> Result<MemberForward> {
    if features.len() != 2 * params.d_model {
        return Err(Error::Shape(format!(
            "features width {} != 2*d_model {}",
            features.len(),
            2 * params.d_model
        )));
    }
    if z.z.len() != params.index_dim {
        return Err(Error::Shape("epistemic index width mismatch".into()));
    }
    if head.d_model != params.d_model {
        return Err(Error::Shape("vocab head width != d_model".into()));
    }
    let mut input = Vec::with_capacity(params.input_dim());
    input.extend_from_slice(features);
    input.extend_from_slice(&z.z);
    // prior path: forward only, never differentiated (stop-gradient)
    let prior_out = params.prior.forward(&input)?;
    let (learn_out, learnable_cache) = params.learnable.forward_cached(&input)?;
    let prior_vec = contract(&prior_out, &z.z, params.d_model);
    let learn_vec = contract(&learn_out, &z.z, params.d_model);
    let combined_vec: Vec<f64> = prior_vec
        .iter()
        .zip(&learn_vec)
        .map(|(p, l)| beta * p + l)
        .collect();
    let logits = head.apply(&combined_vec);
    Ok(MemberForward {
        logits,
        learnable_cache,
    })
}

/// Epinet logits for one (features, z): vocab_head(beta·prior + learnable)
/// where each net's output is contracted against z.
pub fn epinet_forward(
    params: &EpinetParams,
    features: &[f64],
    z: &EpistemicIndex,
    head: VocabHead<'_>,
    beta: f64,
) -> Result<Vec<f64>> {
    Ok(member_forward(params, features, z, head, beta)?.logits)
}

/// softmax(dola_logits + epinet_logits). Raw logits are summed; no
/// intermediate softmax on either operand.
pub fn combined_distribution(dola_logits: &[f64], epinet_logits: &[f64]) -> Result<ProbVector> {
    if dola_logits.len() != epinet_logits.len() {
        return Err(Error::Shape(format!(
            "combined_distribution width mismatch: {} vs {}",
            dola_logits.len(),
            epinet_logits.len()
        )));
    }
    let sum: Vec<f64> = dola_logits
        .iter()
        .zip(epinet_logits)
        .map(|(a, b)| a + b)
        .collect();
    Ok(ProbVector::from_normalized(softmax(&sum)))
}

pub(crate) fn upcast(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

/// Epinet member logits with the training-side ablation applied.
pub(crate) fn effective_member_logits(logits: Vec<f64>, cfg: &EpinetConfig) -> Vec<f64> {
    if cfg.softmax_enn_logits {
        softmax(&logits)
    } else {
        logits
    }
}

/// Marginal prediction: mean over `eval_samples` z draws of the combined
/// distribution (or softmax of mean logits under the ablation variant).
pub fn enn_predict<R: Rng>(
    params: &EpinetParams,
    features: &[f64],
    dola_logits: &[f64],
    cfg: &EpinetConfig,
    head: VocabHead<'_>,
    rng: &mut R,
) -> Result<ProbVector> {
    let zs = sample_indices(rng, params.index_dim, cfg.eval_samples);
    enn_predict_with_indices(params, features, dola_logits, cfg, head, &zs)
}

/// Same as `enn_predict` but over a caller-supplied index set.
pub fn enn_predict_with_indices(
    params: &EpinetParams,
    features: &[f64],
    dola_logits: &[f64],
    cfg: &EpinetConfig,
    head: VocabHead<'_>,
    zs: &[EpistemicIndex],
) -> Result<ProbVector> {
    if zs.is_empty() {
        return Err(Error::InvalidConfig("need at least one epistemic sample".into()));
    }
    let n = zs.len() as f64;
    if cfg.logit_mean_inference {
        let mut acc = vec![0.0; dola_logits.len()];
        for z in zs {
            let el = effective_member_logits(
                epinet_forward(params, features, z, head, cfg.prior_scale)?,
                cfg,
            );
            if el.len() != dola_logits.len() {
                return Err(Error::Shape("epinet logits width mismatch".into()));
            }
            for ((a, d), e) in acc.iter_mut().zip(dola_logits).zip(&el) {
                *a += (d + e) / n;
            }
        }
        Ok(ProbVector::from_normalized(softmax(&acc)))
    } else {
        let mut acc = vec![0.0; dola_logits.len()];
        for z in zs {
            let el = effective_member_logits(
                epinet_forward(params, features, z, head, cfg.prior_scale)?,
                cfg,
            );
            let member = combined_distribution(dola_logits, &el)?;
            for (a, m) in acc.iter_mut().zip(member.as_slice()) {
                *a += m / n;
            }
        }
        Ok(ProbVector::from_normalized(acc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn test_cfg() -> EpinetConfig {
        EpinetConfig {
            index_dim: 3,
            train_samples: 4,
            eval_samples: 4,
            mlp_hidden: vec![16, 16],
            prior_scale: 1.0,
            learning_rate: 0.05,
            lr_drop_factor: 10.0,
            lr_drop_threshold: 0.5,
            convergence_threshold: 0.1,
            batch_size: 8,
            max_epochs: 50,
            checkpoint_every: 25,
            softmax_enn_logits: false,
            logit_mean_inference: false,
            seed: 21,
        }
    }

    fn head_matrix(d_model: usize, vocab: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d_model * vocab)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                n / (d_model as f64).sqrt()
            })
            .collect()
    }

    #[test]
    fn same_seed_gives_identical_params() {
        let cfg = test_cfg();
        let a = init_epinet(&cfg, 8).unwrap();
        let b = init_epinet(&cfg, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_matches_enumerated_shapes() {
        let mut cfg = test_cfg();
        cfg.index_dim = 3;
        cfg.mlp_hidden = vec![32, 32];
        let params = init_epinet(&cfg, 16).unwrap();
        assert_eq!(params.prior.params.len(), 3792);
        assert_eq!(params.learnable.params.len(), 3792);
        assert_eq!(params.param_count(), 7584);
    }

    #[test]
    fn zero_index_gives_zero_logits() {
        let cfg = test_cfg();
        let params = init_epinet(&cfg, 6).unwrap();
        let head_m = head_matrix(6, 9, 1);
        let head = VocabHead::new(&head_m, 6, 9);
        let z = EpistemicIndex { z: vec![0.0; 3] };
        let features = vec![0.7; 12];
        let logits = epinet_forward(&params, &features, &z, head, 1.0).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_params_equal_beta_times_prior_path() {
        let cfg = test_cfg();
        let params = init_epinet(&cfg, 6).unwrap();
        let head_m = head_matrix(6, 9, 2);
        let head = VocabHead::new(&head_m, 6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = sample_indices(&mut rng, 3, 1).remove(0);
        let features: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.5).collect();

        let beta = 0.7;
        let got = epinet_forward(&params, &features, &z, head, beta).unwrap();
        // prior-only oracle
        let mut input = features.clone();
        input.extend_from_slice(&z.z);
        let prior_out = params.prior.forward(&input).unwrap();
        let prior_vec = contract(&prior_out, &z.z, 6);
        let scaled: Vec<f64> = prior_vec.iter().map(|v| beta * v).collect();
        let oracle = head.apply(&scaled);
        assert_eq!(got, oracle);

        // beta = 0 collapses to exactly zero logits
        let zeroed = epinet_forward(&params, &features, &z, head, 0.0).unwrap();
        assert!(zeroed.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let cfg = test_cfg();
        let mut params = init_epinet(&cfg, 4).unwrap();
        // perturb the learnable output layer so both paths contribute
        let n = params.learnable.params.len();
        for (i, p) in params.learnable.params.iter_mut().enumerate().skip(n - 60) {
            *p = ((i % 13) as f64 - 6.0) * 0.03;
        }
        let head_m = head_matrix(4, 7, 3);
        let head = VocabHead::new(&head_m, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = sample_indices(&mut rng, 3, 1).remove(0);
        let features: Vec<f64> = (0..8).map(|i| (i as f64) * 0.2 - 0.7).collect();
        let beta = 1.3;
        let got = epinet_forward(&params, &features, &z, head, beta).unwrap();

        // independent recomputation
        let mut input = features.clone();
        input.extend_from_slice(&z.z);
        let run_net = |m: &Mlp| -> Vec<f64> {
            let mut act = input.clone();
            for l in 0..m.n_layers() {
                let inp = m.dims[l];
                let out = m.dims[l + 1];
                let mut off = 0;
                for k in 0..l {
                    off += m.dims[k] * m.dims[k + 1] + m.dims[k + 1];
                }
                let mut next = vec![0.0; out];
                for (o, val) in next.iter_mut().enumerate() {
                    let mut s = m.params[off + inp * out + o];
                    for i in 0..inp {
                        s += m.params[off + o * inp + i] * act[i];
                    }
                    *val = if l + 1 < m.n_layers() { s.max(0.0) } else { s };
                }
                act = next;
            }
            act
        };
        let p_out = run_net(&params.prior);
        let l_out = run_net(&params.learnable);
        let mut oracle = vec![0.0; 7];
        for w in 0..7 {
            for d in 0..4 {
                let mut pv = 0.0;
                let mut lv = 0.0;
                for k in 0..3 {
                    pv += p_out[d * 3 + k] * z.z[k];
                    lv += l_out[d * 3 + k] * z.z[k];
                }
                oracle[w] += head_m[d * 7 + w] * (beta * pv + lv);
            }
        }
        for (g, o) in got.iter().zip(&oracle) {
            assert!(((g - o) / o.abs().max(1e-9)).abs() < 1e-6, "{g} vs {o}");
        }
    }

    #[test]
    fn combined_distribution_identities() {
        let dola = vec![1.0, 0.0, -1e9];
        let zeros = vec![0.0; 3];
        let p = combined_distribution(&dola, &zeros).unwrap();
        let direct = softmax(&dola);
        assert_eq!(p.as_slice(), direct.as_slice());

        let epi = vec![0.0, 1.0, 0.0];
        let q = combined_distribution(&dola, &epi).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-12);
        assert!((q[1] - 0.5).abs() < 1e-12);
        assert!(q[2] < 1e-100);

        // shift invariance of the summed logits
        let shifted: Vec<f64> = epi.iter().map(|v| v + 7.5).collect();
        let r = combined_distribution(&dola, &shifted).unwrap();
        for (a, b) in q.as_slice().iter().zip(r.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(combined_distribution(&dola, &zeros[..2]).is_err());
    }

    #[test]
    fn sample_indices_are_deterministic_and_standard_normal() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let xs = sample_indices(&mut a, 10, 100);
        let ys = sample_indices(&mut b, 10, 100);
        assert_eq!(xs.len(), 100);
        assert_eq!(xs[0].z.len(), 10);
        assert_eq!(xs, ys);

        // law of large numbers: coordinate means within 5 sigma of 0
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let draws = sample_indices(&mut rng, 4, n);
        for k in 0..4 {
            let mean: f64 = draws.iter().map(|d| d.z[k]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "coordinate {k} mean {mean}");
        }
    }

    #[test]
    fn predict_collapses_for_z_independent_members() {
        let cfg = test_cfg();
        let params = init_epinet(&cfg, 6).unwrap();
        let head_m = head_matrix(6, 9, 4);
        let head = VocabHead::new(&head_m, 6, 9);
        let dola = vec![0.3, -0.2, 0.9, -1e9, 0.0, 0.1, -0.4, 0.25, -0.05];
        let features = vec![0.4; 12];

        // beta = 0 with zero-init learnable: members are z-independent,
        // so the marginal equals softmax(dola) for any sample count
        let mut zero_beta = cfg.clone();
        zero_beta.prior_scale = 0.0;
        zero_beta.eval_samples = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = enn_predict(&params, &features, &dola, &zero_beta, head, &mut rng).unwrap();
        let direct = softmax(&dola);
        assert_eq!(p.as_slice(), direct.as_slice());

        // single fixed z equals a single combined distribution
        let mut one = cfg.clone();
        one.eval_samples = 1;
        let mut rng_a = ChaCha8Rng::seed_from_u64(13);
        let got = enn_predict(&params, &features, &dola, &one, head, &mut rng_a).unwrap();
        let mut rng_b = ChaCha8Rng::seed_from_u64(13);
        let z = sample_indices(&mut rng_b, 3, 1).remove(0);
        let logits = epinet_forward(&params, &features, &z, head, 1.0).unwrap();
        let oracle = combined_distribution(&dola, &logits).unwrap();
        assert_eq!(got.as_slice(), oracle.as_slice());
    }

    #[test]
    fn predict_matches_three_member_average() {
        let cfg = test_cfg();
        let mut params = init_epinet(&cfg, 5).unwrap();
        let n = params.learnable.params.len();
        for (i, p) in params.learnable.params.iter_mut().enumerate().skip(n - 40) {
            *p = ((i % 7) as f64 - 3.0) * 0.05;
        }
        let head_m = head_matrix(5, 8, 6);
        let head = VocabHead::new(&head_m, 5, 8);
        let dola = vec![0.1, -0.3, 0.6, 0.2, -1e9, 0.0, 0.05, -0.6];
        let features = vec![0.25; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let zs = sample_indices(&mut rng, 3, 3);
        let got = enn_predict_with_indices(&params, &features, &dola, &cfg, head, &zs).unwrap();
        // explicit 3-term average oracle
        let mut acc = vec![0.0; 8];
        for z in &zs {
            let logits = epinet_forward(&params, &features, z, head, 1.0).unwrap();
            let member = combined_distribution(&dola, &logits).unwrap();
            for (a, m) in acc.iter_mut().zip(member.as_slice()) {
                *a += m / 3.0;
            }
        }
        for (g, o) in got.as_slice().iter().zip(&acc) {
            assert!((g - o).abs() < 1e-15);
        }
    }
}
