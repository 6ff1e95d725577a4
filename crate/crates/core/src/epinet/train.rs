//! Epinet training: cross-entropy on the combined DoLa+epinet
//! distribution, gradients through the learnable net only, plain SGD with
//! a one-shot learning-rate drop, and the epinet checkpoint container.

use crate::error::{Error, Result};
use crate::io;
use crate::lm::VocabHead;
use crate::math::softmax;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use super::mlp::Mlp;
use super::{
    effective_member_logits, init_epinet, member_forward, sample_indices, upcast, EpinetConfig,
    EpinetParams, EpistemicIndex, TrainingPair, EPINET_MAGIC, LOG_PROB_CLAMP,
};

/// Loss value plus gradients over the learnable net.
pub struct LossGrads {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// (pair, z) items whose target fell on a masked (sentinel) entry.
    pub masked_targets: u64,
}

/// Mean over (pair, z) of -log combined(pair)[target]. Gradients exist
/// only for the learnable net; the prior and the features carry none.
pub fn loss_and_grads(
    params: &EpinetParams,
    batch: &[TrainingPair],
    zs: &[EpistemicIndex],
    head: VocabHead<'_>,
    cfg: &EpinetConfig,
) -> Result<LossGrads> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    if zs.is_empty() {
        return Err(Error::Data("no epistemic samples".into()));
    }
    let items = (batch.len() * zs.len()) as f64;
    let scale = 1.0 / items;
    let clamp_floor = LOG_PROB_CLAMP.exp();
    let mut grads = vec![0.0; params.learnable.params.len()];
    let mut loss = 0.0;
    let mut masked_targets = 0u64;

    for pair in batch {
        pair.validate(params.d_model, head.vocab_size)?;
        let features = upcast(&pair.features);
        let dola = upcast(&pair.dola_logits);
        let target = pair.target_id as usize;
        for z in zs {
            let fwd = member_forward(params, &features, z, head, cfg.prior_scale)?;
            let el = effective_member_logits(fwd.logits, cfg);
            let sum: Vec<f64> = dola.iter().zip(&el).map(|(a, b)| a + b).collect();
            let probs = softmax(&sum);
            let pt = probs[target];
            if pt <= clamp_floor {
                // clamped region: flat loss, no gradient
                loss += -LOG_PROB_CLAMP;
                masked_targets += 1;
                continue;
            }
            loss += -pt.ln();
            // d loss / d combined logits
            let mut dlogits = probs;
            dlogits[target] -= 1.0;
            for g in &mut dlogits {
                *g *= scale;
            }
            // through the ablation softmax if enabled
            let d_el = if cfg.softmax_enn_logits {
                let inner: f64 = dlogits.iter().zip(&el).map(|(a, b)| a * b).sum();
                el.iter()
                    .zip(&dlogits)
                    .map(|(&y, &g)| y * (g - inner))
                    .collect()
            } else {
                dlogits
            };
            let dvec = head.backward_input(&d_el);
            // contraction backward: dout[d, k] = dvec[d] * z[k]
            let index_dim = params.index_dim;
            let mut dout = vec![0.0; params.d_model * index_dim];
            for (d, &dv) in dvec.iter().enumerate() {
                for (k, &zk) in z.z.iter().enumerate() {
                    dout[d * index_dim + k] = dv * zk;
                }
            }
            params.learnable.backward(&fwd.learnable_cache, &dout, &mut grads);
        }
    }
    Ok(LossGrads {
        loss: loss * scale,
        grads,
        masked_targets,
    })
}

/// One epoch of the metrics log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub masked_target_count: u64,
    pub wall_ms: u64,
}

/// Random-access pair supply for shuffled mini-batch training. The
/// in-memory variant wraps a vector; the cache-backed streaming variant
/// in the data pipeline seeks fixed-width records on demand.
pub trait PairSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn load_batch(&mut self, indices: &[usize]) -> Result<Vec<TrainingPair>>;
}

pub struct InMemoryPairs(pub Vec<TrainingPair>);

impl PairSource for InMemoryPairs {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn load_batch(&mut self, indices: &[usize]) -> Result<Vec<TrainingPair>> {
        indices
            .iter()
            .map(|&i| {
                self.0
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("pair index {i} out of range")))
            })
            .collect()
    }
}

/// Epoch loop of shuffled mini-batch SGD on the learnable net. The LR is
/// divided by `lr_drop_factor` once the epoch loss falls below
/// `lr_drop_threshold`; training stops when it falls below
/// `convergence_threshold` or at `max_epochs`. `on_epoch` runs after every
/// epoch (checkpoint sinks hook in here).
pub fn train_epinet<S, F>(
    source: &mut S,
    head: VocabHead<'_>,
    d_model: usize,
    cfg: &EpinetConfig,
    mut on_epoch: F,
) -> Result<(EpinetParams, Vec<EpochRecord>)>
where
    S: PairSource,
    F: FnMut(&EpinetParams, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let mut params = init_epinet(cfg, d_model)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);
    let mut z_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    z_rng.set_stream(3);

    let n = source.len();
    let mut lr = cfg.learning_rate;
    let mut dropped = false;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        indices.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut item_count = 0.0;
        let mut masked = 0u64;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = source.load_batch(chunk)?;
            let zs = sample_indices(&mut z_rng, cfg.index_dim, cfg.train_samples);
            let lg = loss_and_grads(&params, &batch, &zs, head, cfg)?;
            if !lg.loss.is_finite() {
                return Err(Error::TrainingDiverged { step: epoch });
            }
            for (p, g) in params.learnable.params.iter_mut().zip(&lg.grads) {
                *p -= lr * g;
            }
            let items = (chunk.len() * cfg.train_samples) as f64;
            loss_sum += lg.loss * items;
            item_count += items;
            masked += lg.masked_targets;
        }
        let epoch_loss = loss_sum / item_count;
        if !epoch_loss.is_finite() {
            return Err(Error::TrainingDiverged { step: epoch });
        }
        let record = EpochRecord {
            epoch,
            loss: epoch_loss,
            lr,
            masked_target_count: masked,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        on_epoch(&params, &record)?;
        records.push(record);
        if !dropped && epoch_loss < cfg.lr_drop_threshold {
            lr /= cfg.lr_drop_factor;
            dropped = true;
        }
        if epoch_loss < cfg.convergence_threshold {
            break;
        }
    }
    Ok((params, records))
}

/// Epinet checkpoint: magic "ENNEPI01", version, prior seed, shape block,
/// then the prior and learnable parameter tensors stored separately.
pub fn save_epinet_checkpoint(params: &EpinetParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_epinet(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn write_epinet<W: Write>(w: &mut W, params: &EpinetParams) -> Result<()> {
    io::write_magic(w, &EPINET_MAGIC)?;
    io::write_u64(w, params.prior_seed)?;
    io::write_u64(w, params.index_dim as u64)?;
    io::write_u64(w, params.d_model as u64)?;
    io::write_u32(w, params.prior.dims.len() as u32)?;
    for &d in &params.prior.dims {
        io::write_u64(w, d as u64)?;
    }
    io::write_tensor_f64(w, &[params.prior.params.len()], &params.prior.params)?;
    io::write_tensor_f64(w, &[params.learnable.params.len()], &params.learnable.params)?;
    Ok(())
}

pub fn load_epinet_checkpoint(path: &Path) -> Result<EpinetParams> {
    let mut r = BufReader::new(File::open(path)?);
    let params = read_epinet(&mut r)?;
    io::expect_eof(&mut r)?;
    Ok(params)
}

fn read_epinet<R: Read>(r: &mut R) -> Result<EpinetParams> {
    io::read_magic(r, &EPINET_MAGIC)?;
    let prior_seed = io::read_u64(r)?;
    let index_dim = io::read_dim(r, "index_dim")?;
    let d_model = io::read_dim(r, "d_model")?;
    let n_dims = io::read_u32(r)? as usize;
    if n_dims < 3 {
        return Err(Error::Format("epinet checkpoint needs >= 3 mlp dims".into()));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(io::read_dim(r, "mlp dim")?);
    }
    if dims[0] != 2 * d_model + index_dim || dims[n_dims - 1] != d_model * index_dim {
        return Err(Error::Format("epinet checkpoint dims inconsistent".into()));
    }
    let count = Mlp::param_count(&dims);
    let prior = Mlp {
        dims: dims.clone(),
        params: io::read_tensor_f64(r, &[count])?,
    };
    let learnable = Mlp {
        dims,
        params: io::read_tensor_f64(r, &[count])?,
    };
    if prior.params.iter().chain(&learnable.params).any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite parameter in epinet checkpoint".into()));
    }
    Ok(EpinetParams {
        index_dim,
        d_model,
        prior,
        learnable,
        prior_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn cfg() -> EpinetConfig {
        EpinetConfig {
            index_dim: 2,
            train_samples: 2,
            eval_samples: 2,
            mlp_hidden: vec![8, 8],
            prior_scale: 1.0,
            learning_rate: 0.2,
            lr_drop_factor: 10.0,
            lr_drop_threshold: 0.3,
            convergence_threshold: 0.1,
            batch_size: 8,
            max_epochs: 400,
            checkpoint_every: 0,
            softmax_enn_logits: false,
            logit_mean_inference: false,
            seed: 77,
        }
    }

    fn random_head(d_model: usize, vocab: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d_model * vocab)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                n / (d_model as f64).sqrt()
            })
            .collect()
    }

    fn random_pairs(
        n: usize,
        d_model: usize,
        vocab: usize,
        seed: u64,
    ) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| TrainingPair {
                features: (0..2 * d_model)
                    .map(|_| {
                        let v: f64 = rng.sample(StandardNormal);
                        v as f32
                    })
                    .collect(),
                dola_logits: (0..vocab)
                    .map(|_| {
                        let v: f64 = rng.sample(StandardNormal);
                        (0.3 * v) as f32
                    })
                    .collect(),
                target_id: rng.random_range(0..vocab as u32),
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let c = cfg();
        let d_model = 4;
        let vocab = 6;
        let mut params = init_epinet(&c, d_model).unwrap();
        // non-trivial learnable output layer so gradients flow everywhere
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for p in params.learnable.params.iter_mut() {
            if *p == 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                *p = 0.1 * n;
            }
        }
        let head_m = random_head(d_model, vocab, 5);
        let head = VocabHead::new(&head_m, d_model, vocab);
        let batch = random_pairs(2, d_model, vocab, 6);
        let mut z_rng = ChaCha8Rng::seed_from_u64(7);
        let zs = sample_indices(&mut z_rng, c.index_dim, 2);

        let lg = loss_and_grads(&params, &batch, &zs, head, &c).unwrap();
        let eps = 1e-4;
        for i in 0..params.learnable.params.len() {
            let mut pp = params.clone();
            pp.learnable.params[i] += eps;
            let mut pm = params.clone();
            pm.learnable.params[i] -= eps;
            let lp = loss_and_grads(&pp, &batch, &zs, head, &c).unwrap().loss;
            let lm = loss_and_grads(&pm, &batch, &zs, head, &c).unwrap().loss;
            let fd = (lp - lm) / (2.0 * eps);
            let denom = lg.grads[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                ((lg.grads[i] - fd) / denom).abs() < 1e-4,
                "grad {i}: {} vs {}",
                lg.grads[i],
                fd
            );
        }
    }

    #[test]
    fn ablation_softmax_gradients_match_finite_differences() {
        let mut c = cfg();
        c.softmax_enn_logits = true;
        let d_model = 3;
        let vocab = 5;
        let mut params = init_epinet(&c, d_model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for p in params.learnable.params.iter_mut() {
            if *p == 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                *p = 0.1 * n;
            }
        }
        let head_m = random_head(d_model, vocab, 9);
        let head = VocabHead::new(&head_m, d_model, vocab);
        let batch = random_pairs(2, d_model, vocab, 10);
        let mut z_rng = ChaCha8Rng::seed_from_u64(11);
        let zs = sample_indices(&mut z_rng, c.index_dim, 2);
        let lg = loss_and_grads(&params, &batch, &zs, head, &c).unwrap();
        let eps = 1e-4;
        for i in (0..params.learnable.params.len()).step_by(3) {
            let mut pp = params.clone();
            pp.learnable.params[i] += eps;
            let mut pm = params.clone();
            pm.learnable.params[i] -= eps;
            let lp = loss_and_grads(&pp, &batch, &zs, head, &c).unwrap().loss;
            let lm = loss_and_grads(&pm, &batch, &zs, head, &c).unwrap().loss;
            let fd = (lp - lm) / (2.0 * eps);
            let denom = lg.grads[i].abs().max(fd.abs()).max(1e-6);
            assert!(((lg.grads[i] - fd) / denom).abs() < 1e-4, "grad {i}");
        }
    }

    #[test]
    fn masked_target_is_clamped_and_counted() {
        let c = cfg();
        let d_model = 3;
        let vocab = 4;
        let params = init_epinet(&c, d_model).unwrap();
        let head_m = random_head(d_model, vocab, 2);
        let head = VocabHead::new(&head_m, d_model, vocab);
        let pair = TrainingPair {
            features: vec![0.1; 6],
            dola_logits: vec![0.0, 0.5, -1e9, 0.2],
            target_id: 2,
        };
        let mut z_rng = ChaCha8Rng::seed_from_u64(3);
        let zs = sample_indices(&mut z_rng, c.index_dim, 3);
        let lg = loss_and_grads(&params, &[pair], &zs, head, &c).unwrap();
        assert_eq!(lg.masked_targets, 3);
        assert!((lg.loss - 30.0).abs() < 1e-12);
        assert!(lg.grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn training_overfits_a_small_random_dataset() {
        let mut c = cfg();
        c.mlp_hidden = vec![32, 32];
        c.train_samples = 4;
        c.learning_rate = 0.5;
        c.batch_size = 16;
        c.max_epochs = 800;
        let d_model = 6;
        let vocab = 16;
        let head_m = random_head(d_model, vocab, 20);
        let head = VocabHead::new(&head_m, d_model, vocab);
        let mut source = InMemoryPairs(random_pairs(16, d_model, vocab, 21));
        let (_, records) =
            train_epinet(&mut source, head, d_model, &c, |_, _| Ok(())).unwrap();
        let last = records.last().unwrap();
        assert!(
            last.loss < c.convergence_threshold,
            "loss {} after {} epochs",
            last.loss,
            last.epoch
        );
        // lr drop fired exactly once on the way down
        let lrs: Vec<f64> = records.iter().map(|r| r.lr).collect();
        assert!(lrs.first().unwrap() > lrs.last().unwrap());
        let distinct: std::collections::BTreeSet<u64> =
            lrs.iter().map(|l| l.to_bits()).collect();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn training_is_seed_deterministic_and_prior_stays_frozen() {
        let mut c = cfg();
        c.max_epochs = 8;
        c.convergence_threshold = 1e-9;
        let d_model = 4;
        let vocab = 8;
        let head_m = random_head(d_model, vocab, 30);
        let head = VocabHead::new(&head_m, d_model, vocab);
        let pairs = random_pairs(12, d_model, vocab, 31);
        let init = init_epinet(&c, d_model).unwrap();

        let mut s1 = InMemoryPairs(pairs.clone());
        let (p1, r1) = train_epinet(&mut s1, head, d_model, &c, |_, _| Ok(())).unwrap();
        let mut s2 = InMemoryPairs(pairs);
        let (p2, r2) = train_epinet(&mut s2, head, d_model, &c, |_, _| Ok(())).unwrap();
        assert_eq!(p1, p2);
        let l1: Vec<u64> = r1.iter().map(|r| r.loss.to_bits()).collect();
        let l2: Vec<u64> = r2.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(l1, l2);
        assert_eq!(p1.prior_bytes(), init.prior_bytes());
        assert_ne!(p1.learnable.params, init.learnable.params);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut c = cfg();
        c.max_epochs = 0;
        let d_model = 4;
        let head_m = random_head(d_model, 8, 1);
        let head = VocabHead::new(&head_m, d_model, 8);
        let mut source = InMemoryPairs(random_pairs(4, d_model, 8, 2));
        let (p, records) = train_epinet(&mut source, head, d_model, &c, |_, _| Ok(())).unwrap();
        assert!(records.is_empty());
        assert_eq!(p, init_epinet(&c, d_model).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let c = cfg();
        let params = init_epinet(&c, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("epi.ckpt");
        save_epinet_checkpoint(&params, &path).unwrap();
        let loaded = load_epinet_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_epinet_checkpoint(&path),
            Err(Error::Format(_))
        ));
    }
}
