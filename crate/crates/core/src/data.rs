//! Corpus handling: byte-level tokenizer, epinet training-pair
//! generation through the frozen LM + DoLa pipeline, and the streamable
//! binary feature cache.

use crate::dola::{dola_step, DolaConfig};
use crate::epinet::{PairSource, TrainingPair};
use crate::error::{Error, Result};
use crate::io;
use crate::lm::{TokenSequence, TransformerWeights};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

pub const CACHE_MAGIC: [u8; 8] = *b"ENNCACHE";

/// Byte-level tokenizer: ids 0..=255 are raw bytes, then BOS and EOS.
/// Stands in for a subword vocabulary while keeping decode(encode(s)) = s.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;

    pub fn vocab_size(&self) -> usize {
        258
    }

    /// [BOS, bytes..., EOS]
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(Self::BOS);
        ids.extend(text.bytes().map(u32::from));
        ids.push(Self::EOS);
        TokenSequence::new_checked(ids, self.vocab_size()).expect("byte ids are in range")
    }

    /// Raw byte ids with no specials; used for prompt/continuation spans.
    pub fn encode_raw(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Drops special ids and reassembles bytes (lossy on invalid UTF-8,
    /// which cannot arise from `tokenize` output).
    pub fn detokenize(&self, tokens: &TokenSequence) -> String {
        let bytes: Vec<u8> = tokens
            .as_slice()
            .iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Cache file header; ties the pairs to the checkpoint that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheHeader {
    pub model_hash: [u8; 32],
    pub dola: DolaConfig,
    pub d_model: usize,
    pub vocab_size: usize,
    pub pair_count: u64,
}

impl CacheHeader {
    fn record_bytes(&self) -> usize {
        (2 * self.d_model + self.vocab_size) * 4 + 4
    }
}

/// Materialized training pairs plus their header.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub header: CacheHeader,
    pub pairs: Vec<TrainingPair>,
}

/// Closed-form pair yield of one document of `len` tokens under the
/// prefix-drop rule (documents under 5 tokens are skipped).
pub fn expected_pair_count(len: usize, prefix_drop: f64) -> usize {
    if len < 5 {
        return 0;
    }
    let dropped = (prefix_drop * len as f64).floor() as usize;
    (len - 1).saturating_sub(dropped)
}

/// Runs every document through the frozen LM + DoLa pipeline and collects
/// one TrainingPair per eligible position: features h_M(t) ⊕ h_N(t), the
/// DoLa logits at t, and the true next token. Positions inside the first
/// ⌊prefix_drop·len⌋ tokens yield no pair; the final position has no next
/// token. Documents shorter than 5 tokens are skipped with a warning;
/// documents beyond max_seq_len are truncated with a warning.
pub fn build_training_pairs(
    weights: &TransformerWeights,
    dola_cfg: &DolaConfig,
    docs: &[String],
    prefix_drop: f64,
) -> Result<FeatureCache> {
    if !(0.0..1.0).contains(&prefix_drop) {
        return Err(Error::InvalidConfig(format!(
            "prefix_drop must be in [0,1), got {prefix_drop}"
        )));
    }
    dola_cfg.validate()?;
    let tokenizer = ByteTokenizer;
    if weights.config.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Data(format!(
            "model vocab {} incompatible with byte tokenizer vocab {}",
            weights.config.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let d_model = weights.config.d_model;
    let mut pairs = Vec::new();
    for (doc_idx, doc) in docs.iter().enumerate() {
        let full = tokenizer.tokenize(doc);
        if full.len() < 5 {
            log::warn!("doc {doc_idx}: only {} tokens, skipped", full.len());
            continue;
        }
        let mut ids = full.as_slice().to_vec();
        if ids.len() > weights.config.max_seq_len {
            log::warn!(
                "doc {doc_idx}: {} tokens truncated to max_seq_len {}",
                ids.len(),
                weights.config.max_seq_len
            );
            ids.truncate(weights.config.max_seq_len);
        }
        let len = ids.len();
        let seq = TokenSequence::new_checked(ids.clone(), weights.config.vocab_size)?;
        let taps = weights.forward_with_taps(&seq)?;
        let dropped = (prefix_drop * len as f64).floor() as usize;
        for t in dropped..len.saturating_sub(1) {
            let res = dola_step(&taps, t, dola_cfg, weights)?;
            let mut features = Vec::with_capacity(2 * d_model);
            features.extend(taps.hidden(t, res.premature_index).iter().map(|&v| v as f32));
            features.extend(taps.hidden(t, dola_cfg.mature_layer).iter().map(|&v| v as f32));
            let dola_logits: Vec<f32> = res.dola_logits.iter().map(|&v| v as f32).collect();
            pairs.push(TrainingPair {
                features,
                dola_logits,
                target_id: ids[t + 1],
            });
        }
    }
    Ok(FeatureCache {
        header: CacheHeader {
            model_hash: weights.content_hash(),
            dola: dola_cfg.clone(),
            d_model,
            vocab_size: weights.config.vocab_size,
            pair_count: pairs.len() as u64,
        },
        pairs,
    })
}

impl FeatureCache {
    /// Binary cache: magic "ENNCACHE", version, model hash, DolaConfig,
    /// dims, pair count, then fixed-width records.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        io::write_magic(&mut w, &CACHE_MAGIC)?;
        w.write_all(&self.header.model_hash)?;
        io::write_f64(&mut w, self.header.dola.alpha)?;
        io::write_u64(&mut w, self.header.dola.mature_layer as u64)?;
        io::write_u32(&mut w, self.header.dola.candidate_layers.len() as u32)?;
        for &j in &self.header.dola.candidate_layers {
            io::write_u64(&mut w, j as u64)?;
        }
        io::write_u64(&mut w, self.header.d_model as u64)?;
        io::write_u64(&mut w, self.header.vocab_size as u64)?;
        io::write_u64(&mut w, self.header.pair_count)?;
        for pair in &self.pairs {
            for &f in &pair.features {
                w.write_all(&f.to_le_bytes())?;
            }
            for &l in &pair.dola_logits {
                w.write_all(&l.to_le_bytes())?;
            }
            w.write_all(&pair.target_id.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }
}

fn read_header<R: Read>(r: &mut R) -> Result<CacheHeader> {
    io::read_magic(r, &CACHE_MAGIC)?;
    let mut model_hash = [0u8; 32];
    r.read_exact(&mut model_hash)
        .map_err(|_| Error::Format("cache header truncated".into()))?;
    let alpha = io::read_f64(r)?;
    let mature_layer = io::read_dim(r, "mature_layer")?;
    let n_cand = io::read_u32(r)? as usize;
    if n_cand == 0 || n_cand > 4096 {
        return Err(Error::Format(format!("implausible candidate count {n_cand}")));
    }
    let mut candidate_layers = Vec::with_capacity(n_cand);
    for _ in 0..n_cand {
        candidate_layers.push(io::read_dim(r, "candidate layer")?);
    }
    let d_model = io::read_dim(r, "d_model")?;
    let vocab_size = io::read_dim(r, "vocab_size")?;
    let pair_count = io::read_u64(r)?;
    Ok(CacheHeader {
        model_hash,
        dola: DolaConfig {
            candidate_layers,
            alpha,
            mature_layer,
        },
        d_model,
        vocab_size,
        pair_count,
    })
}

fn read_record<R: Read>(r: &mut R, header: &CacheHeader, index: u64) -> Result<TrainingPair> {
    let feat_n = 2 * header.d_model;
    let mut buf4 = [0u8; 4];
    let mut take = |what: &str| -> Result<[u8; 4]> {
        r.read_exact(&mut buf4).map_err(|_| {
            Error::Format(format!("cache record {index} truncated reading {what}"))
        })?;
        Ok(buf4)
    };
    let mut features = Vec::with_capacity(feat_n);
    for _ in 0..feat_n {
        features.push(f32::from_le_bytes(take("features")?));
    }
    let mut dola_logits = Vec::with_capacity(header.vocab_size);
    for _ in 0..header.vocab_size {
        dola_logits.push(f32::from_le_bytes(take("dola_logits")?));
    }
    let target_id = u32::from_le_bytes(take("target")?);
    if target_id as usize >= header.vocab_size {
        return Err(Error::Format(format!(
            "cache record {index}: target {target_id} out of vocab"
        )));
    }
    Ok(TrainingPair {
        features,
        dola_logits,
        target_id,
    })
}

/// Reads just the header of a cache file.
pub fn read_cache_header(path: &Path) -> Result<CacheHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadMode {
    /// Hold O(batch) records; the file is walked in order.
    Streaming,
    /// Materialize every pair up front.
    InMemory,
}

/// Iterate pairs in stored order after validating the producing
/// checkpoint's hash.
pub fn read_pairs(
    path: &Path,
    expected_model_hash: &[u8; 32],
    mode: ReadMode,
) -> Result<PairIter> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    if &header.model_hash != expected_model_hash {
        return Err(Error::Compatibility(format!(
            "cache was built from checkpoint {}, expected {}",
            io::sha256_hex(&header.model_hash)[..12].to_string(),
            io::sha256_hex(expected_model_hash)[..12].to_string()
        )));
    }
    match mode {
        ReadMode::Streaming => Ok(PairIter::Streaming {
            next: 0,
            header,
            reader: r,
        }),
        ReadMode::InMemory => {
            let mut pairs = Vec::with_capacity(header.pair_count as usize);
            for i in 0..header.pair_count {
                pairs.push(read_record(&mut r, &header, i)?);
            }
            io::expect_eof(&mut r)?;
            Ok(PairIter::InMemory {
                pairs: pairs.into_iter(),
                header,
            })
        }
    }
}

pub enum PairIter {
    Streaming {
        next: u64,
        header: CacheHeader,
        reader: BufReader<File>,
    },
    InMemory {
        pairs: std::vec::IntoIter<TrainingPair>,
        header: CacheHeader,
    },
}

impl PairIter {
    pub fn header(&self) -> &CacheHeader {
        match self {
            PairIter::Streaming { header, .. } => header,
            PairIter::InMemory { header, .. } => header,
        }
    }
}

impl Iterator for PairIter {
    type Item = Result<TrainingPair>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            PairIter::Streaming {
                next,
                header,
                reader,
            } => {
                if *next >= header.pair_count {
                    return None;
                }
                let item = read_record(reader, header, *next);
                *next += 1;
                Some(item)
            }
            PairIter::InMemory { pairs, .. } => pairs.next().map(Ok),
        }
    }
}

/// Seek-based random access over cache records; lets epinet training
/// shuffle mini-batches while holding O(batch) pairs in memory.
pub struct StreamingPairs {
    file: File,
    header: CacheHeader,
    data_offset: u64,
}

impl StreamingPairs {
    pub fn open(path: &Path, expected_model_hash: &[u8; 32]) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let header = read_header(&mut r)?;
        if &header.model_hash != expected_model_hash {
            return Err(Error::Compatibility(
                "cache was built from a different checkpoint".into(),
            ));
        }
        let data_offset = r.stream_position()?;
        Ok(Self {
            file: r.into_inner(),
            header,
            data_offset,
        })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }
}

impl PairSource for StreamingPairs {
    fn len(&self) -> usize {
        self.header.pair_count as usize
    }

    fn load_batch(&mut self, indices: &[usize]) -> Result<Vec<TrainingPair>> {
        let rec = self.header.record_bytes() as u64;
        indices
            .iter()
            .map(|&i| {
                if i as u64 >= self.header.pair_count {
                    return Err(Error::Data(format!("pair index {i} out of range")));
                }
                self.file
                    .seek(SeekFrom::Start(self.data_offset + i as u64 * rec))?;
                read_record(&mut self.file, &self.header, i as u64)
            })
            .collect()
    }
}

/// Loads documents: a `.jsonl` file with a "text" field per line, a
/// directory of files (sorted by name), or any other file as one document.
pub fn load_documents(path: &Path) -> Result<Vec<String>> {
    if path.is_dir() {
        let mut names: Vec<_> = std::fs::read_dir(path)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        return names
            .iter()
            .map(|p| std::fs::read_to_string(p).map_err(Error::from))
            .collect();
    }
    let text = std::fs::read_to_string(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let mut docs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| {
                Error::Data(format!("{}:{}: invalid json: {e}", path.display(), lineno + 1))
            })?;
            let doc = value
                .get("text")
                .and_then(|t| t.as_str())
                .ok_or_else(|| {
                    Error::Data(format!(
                        "{}:{}: missing \"text\" field",
                        path.display(),
                        lineno + 1
                    ))
                })?;
            docs.push(doc.to_string());
        }
        Ok(docs)
    } else {
        Ok(vec![text])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn model() -> TransformerWeights {
        let cfg = ModelConfig {
            vocab_size: 258,
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 32,
            norm_epsilon: 1e-5,
        };
        TransformerWeights::init(&cfg, 99).unwrap()
    }

    #[test]
    fn tokenizer_basics() {
        let t = ByteTokenizer;
        assert_eq!(t.tokenize("").as_slice(), &[ByteTokenizer::BOS, ByteTokenizer::EOS]);
        assert_eq!(
            t.tokenize("ab").as_slice(),
            &[ByteTokenizer::BOS, 97, 98, ByteTokenizer::EOS]
        );
        let s = "snowman ☃ and bytes";
        assert_eq!(t.detokenize(&t.tokenize(s)), s);
    }

    #[test]
    fn pair_window_rule() {
        // 10 tokens at drop 0.2 -> positions 2..=8, 7 pairs
        assert_eq!(expected_pair_count(10, 0.2), 7);
        assert_eq!(expected_pair_count(10, 0.0), 9);
        assert_eq!(expected_pair_count(4, 0.2), 0);

        let w = model();
        let dola = DolaConfig::default_for(4);
        // "abcdefgh" tokenizes to 10 tokens with BOS/EOS
        let docs = vec!["abcdefgh".to_string()];
        let cache = build_training_pairs(&w, &dola, &docs, 0.2).unwrap();
        assert_eq!(cache.pairs.len(), 7);
        // first pair's target is the token at position 3 (byte 'c')
        assert_eq!(cache.pairs[0].target_id, b'c' as u32);
        // last pair's target is EOS
        assert_eq!(cache.pairs.last().unwrap().target_id, ByteTokenizer::EOS);
        assert_eq!(cache.header.pair_count, 7);

        let none = build_training_pairs(&w, &dola, &["ab".to_string()], 0.2).unwrap();
        assert_eq!(none.pairs.len(), 0);
    }

    #[test]
    fn pair_generation_is_deterministic() {
        let w = model();
        let dola = DolaConfig::default_for(4);
        let docs = vec!["hello world".to_string(), "more text".to_string()];
        let a = build_training_pairs(&w, &dola, &docs, 0.2).unwrap();
        let b = build_training_pairs(&w, &dola, &docs, 0.2).unwrap();
        assert_eq!(a.pairs, b.pairs);

        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.cache");
        let pb = dir.path().join("b.cache");
        a.write(&pa).unwrap();
        b.write(&pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn cache_round_trip_and_modes_agree() {
        let w = model();
        let dola = DolaConfig::default_for(4);
        let docs = vec![
            "the quick brown fox".to_string(),
            "jumps over the lazy dog".to_string(),
        ];
        let cache = build_training_pairs(&w, &dola, &docs, 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.cache");
        cache.write(&path).unwrap();

        let hash = w.content_hash();
        let streamed: Vec<TrainingPair> = read_pairs(&path, &hash, ReadMode::Streaming)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        let in_mem: Vec<TrainingPair> = read_pairs(&path, &hash, ReadMode::InMemory)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(streamed, in_mem);
        assert_eq!(streamed, cache.pairs);

        // random access agrees with sequential order
        let mut sp = StreamingPairs::open(&path, &hash).unwrap();
        let got = sp.load_batch(&[3, 0, streamed.len() - 1]).unwrap();
        assert_eq!(got[0], streamed[3]);
        assert_eq!(got[1], streamed[0]);
        assert_eq!(got[2], *streamed.last().unwrap());
    }

    #[test]
    fn wrong_checkpoint_hash_is_a_compatibility_error() {
        let w = model();
        let dola = DolaConfig::default_for(4);
        let cache = build_training_pairs(&w, &dola, &["some document".to_string()], 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.cache");
        cache.write(&path).unwrap();
        let other = [0u8; 32];
        assert!(matches!(
            read_pairs(&path, &other, ReadMode::Streaming),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn truncated_record_names_its_index() {
        let w = model();
        let dola = DolaConfig::default_for(4);
        let cache = build_training_pairs(&w, &dola, &["some document".to_string()], 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.cache");
        cache.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let hash = w.content_hash();
        let result: Result<Vec<TrainingPair>> =
            read_pairs(&path, &hash, ReadMode::Streaming).unwrap().collect();
        let err = result.unwrap_err();
        let last = cache.pairs.len() - 1;
        assert!(err.to_string().contains(&format!("record {last}")), "{err}");
    }

    #[test]
    fn features_match_tap_states() {
        let w = model();
        let dola = DolaConfig::default_for(4);
        let doc = "check the features".to_string();
        let cache = build_training_pairs(&w, &dola, &[doc.clone()], 0.2).unwrap();
        let tok = ByteTokenizer;
        let seq = tok.tokenize(&doc);
        let taps = w.forward_with_taps(&seq).unwrap();
        let len = seq.len();
        let dropped = (0.2 * len as f64).floor() as usize;
        let d = w.config.d_model;
        for (k, pair) in cache.pairs.iter().enumerate() {
            let t = dropped + k;
            let res = dola_step(&taps, t, &dola, &w).unwrap();
            let h_m = taps.hidden(t, res.premature_index);
            let h_n = taps.hidden(t, 4);
            for i in 0..d {
                assert_eq!(pair.features[i], h_m[i] as f32);
                assert_eq!(pair.features[d + i], h_n[i] as f32);
            }
            assert_eq!(pair.target_id, seq.as_slice()[t + 1]);
            assert!(pair.features.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn jsonl_documents_load_with_text_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.jsonl");
        std::fs::write(&path, "{\"text\": \"alpha\"}\n\n{\"text\": \"beta\"}\n").unwrap();
        assert_eq!(load_documents(&path).unwrap(), vec!["alpha", "beta"]);
        std::fs::write(&path, "{\"no_text\": 1}\n").unwrap();
        assert!(load_documents(&path).is_err());
    }
}
