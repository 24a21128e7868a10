//! Code embeddings via skip-gram with negative sampling, plus the record
//! encoder/decoder between event sequences and dense `[T, M]` matrices.
//!
//! The context stream for a record is its ordered event codes followed by a
//! synthetic END token, so END is trained like a code that appears at every
//! record end and generated rows can signal termination. Padding rows are
//! exact zeros and are *not* vocabulary entries: decoding maps zero-norm rows
//! to `Pad`, everything else to the cosine-nearest code or END.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::synth::{hex16, Cohort, PatientRecord};
use crate::tensor::{checkpoint, layers, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedConfig {
    /// Embedding dimension M.
    pub dim: usize,
    /// Max skip-gram context offset; the per-position span is uniform in [1, window].
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly over all scheduled positions.
    pub lr: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig { dim: 200, window: 5, negatives: 5, epochs: 5, lr: 0.025 }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.epochs == 0 {
            return Err(Error::invalid("embedding: dim, window, epochs must be > 0"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("embedding: lr {} must be > 0", self.lr)));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!(
            "dim={}\nepochs={}\nlr={}\nnegatives={}\nwindow={}\n",
            self.dim, self.epochs, self.lr, self.negatives, self.window
        )
    }

    pub fn hash(&self) -> String {
        hex16(&Sha256::digest(self.canonical().as_bytes()))
    }
}

/// `(V+1) x dim` matrix: one row per code, final row is the END mark.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    vocab_size: u32,
    dim: usize,
    vectors: Vec<f64>,
    pub source_hash: String,
    pub config_hash: String,
}

impl EmbeddingTable {
    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row index of the END mark.
    pub fn end_index(&self) -> usize {
        self.vocab_size as usize
    }

    pub fn rows(&self) -> usize {
        self.vocab_size as usize + 1
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.vectors[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    /// Per-dimension max absolute value over all rows; the generator output
    /// range is tanh scaled by this.
    pub fn per_dim_max_abs(&self) -> Vec<f64> {
        let mut s = vec![0.0f64; self.dim];
        for row in self.vectors.chunks(self.dim) {
            for (m, v) in s.iter_mut().zip(row) {
                *m = m.max(v.abs());
            }
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct EmbedTrainStats {
    /// Mean negative-sampling loss per pair, one entry per epoch.
    pub per_epoch_loss: Vec<f64>,
    /// Codes never seen in the corpus; they keep their random init rows.
    pub untrained_codes: Vec<u32>,
    pub pairs_per_epoch: u64,
}

/// Train skip-gram-with-negative-sampling embeddings over every record of
/// the cohort (all splits; the embedding is an unsupervised preprocessor).
pub fn train_embedding(
    cohort: &Cohort,
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<(EmbeddingTable, EmbedTrainStats)> {
    cfg.validate()?;
    let v = cohort.vocab.size() as usize;
    let rows = v + 1; // END
    let end_token = v as u32;
    let dim = cfg.dim;
    let mut r = rng::substream(seed, "embedding");

    // token counts; END once per record
    let mut counts = vec![0u64; rows];
    for rec in &cohort.records {
        for e in &rec.events {
            if e.code as usize >= v {
                return Err(Error::invalid(format!(
                    "embedding: record {} has code {} outside vocabulary of {v}",
                    rec.id, e.code
                )));
            }
            counts[e.code as usize] += 1;
        }
        counts[v] += 1;
    }
    let untrained_codes: Vec<u32> =
        (0..v as u32).filter(|&c| counts[c as usize] == 0).collect();

    // unigram^(3/4) cumulative table for negative sampling
    let mut cum = Vec::with_capacity(rows);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cum.push(acc);
    }
    if acc <= 0.0 {
        return Err(Error::invalid("embedding: empty corpus"));
    }

    // input vectors: small uniform init; output vectors: zeros (word2vec style)
    let mut syn0: Vec<f64> = (0..rows * dim)
        .map(|_| (r.random::<f64>() - 0.5) / dim as f64)
        .collect();
    let mut syn1 = vec![0.0f64; rows * dim];

    let total_positions: u64 = cohort
        .records
        .iter()
        .map(|rec| rec.events.len() as u64 + 1)
        .sum::<u64>()
        * cfg.epochs as u64;
    let mut processed: u64 = 0;

    let mut stats = EmbedTrainStats { untrained_codes, ..EmbedTrainStats::default() };
    let mut sentence: Vec<u32> = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_pairs: u64 = 0;
        for rec in &cohort.records {
            sentence.clear();
            sentence.extend(rec.events.iter().map(|e| e.code));
            sentence.push(end_token);
            for t in 0..sentence.len() {
                let alpha =
                    cfg.lr * (1.0 - processed as f64 / total_positions as f64).max(1e-4);
                processed += 1;
                let span = r.random_range(1..=cfg.window);
                let lo = t.saturating_sub(span);
                let hi = (t + span).min(sentence.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == t {
                        continue;
                    }
                    let center = sentence[t] as usize;
                    let context = sentence[ctx_pos] as usize;
                    let vrow = center * dim;
                    let mut v_delta = vec![0.0f64; dim];
                    let mut pair_loss = 0.0;
                    for neg in 0..=cfg.negatives {
                        let (target, label) = if neg == 0 {
                            (context, 1.0)
                        } else {
                            let x = r.random::<f64>() * acc;
                            let mut idx = cum.partition_point(|&c| c <= x);
                            if idx >= rows {
                                idx = rows - 1;
                            }
                            if idx == context {
                                continue;
                            }
                            (idx, 0.0)
                        };
                        let urow = target * dim;
                        let mut dot = 0.0;
                        for i in 0..dim {
                            dot += syn0[vrow + i] * syn1[urow + i];
                        }
                        let p = sigmoid(dot);
                        pair_loss -= if label > 0.5 {
                            p.max(1e-12).ln()
                        } else {
                            (1.0 - p).max(1e-12).ln()
                        };
                        let g = (label - p) * alpha;
                        for i in 0..dim {
                            v_delta[i] += g * syn1[urow + i];
                            syn1[urow + i] += g * syn0[vrow + i];
                        }
                    }
                    for i in 0..dim {
                        syn0[vrow + i] += v_delta[i];
                    }
                    epoch_loss += pair_loss;
                    epoch_pairs += 1;
                }
            }
        }
        stats.per_epoch_loss.push(epoch_loss / epoch_pairs.max(1) as f64);
        if epoch == 0 {
            stats.pairs_per_epoch = epoch_pairs;
        }
    }

    Ok((
        EmbeddingTable {
            vocab_size: v as u32,
            dim,
            vectors: syn0,
            source_hash: cohort.spec_hash.clone(),
            config_hash: cfg.hash(),
        },
        stats,
    ))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Embed one record into a fixed `[rows, dim]` matrix: event vectors in
/// order (most recent kept if the record exceeds `rows - 1`), then the END
/// row, then zero padding. Returns the matrix and the filled row count
/// (events + END).
pub fn embed_record(
    rec: &PatientRecord,
    table: &EmbeddingTable,
    rows: usize,
) -> Result<(Tensor, usize)> {
    if rows < 2 {
        return Err(Error::invalid("embed_record: need at least 2 rows (event + END)"));
    }
    let dim = table.dim;
    let mut out = vec![0.0; rows * dim];
    let n_events = rec.events.len().min(rows - 1);
    let start = rec.events.len() - n_events;
    for (i, e) in rec.events[start..].iter().enumerate() {
        if e.code as usize >= table.vocab_size as usize {
            return Err(Error::invalid(format!(
                "embed_record: record {} has code {} outside vocabulary of {}",
                rec.id, e.code, table.vocab_size
            )));
        }
        out[i * dim..(i + 1) * dim].copy_from_slice(table.row(e.code as usize));
    }
    out[n_events * dim..(n_events + 1) * dim].copy_from_slice(table.row(table.end_index()));
    Ok((Tensor::from_vec(&[rows, dim], out)?, n_events + 1))
}

/// Stack several records into `[B, rows, dim]`; also returns true lengths.
pub fn embed_batch(
    records: &[&PatientRecord],
    table: &EmbeddingTable,
    rows: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let dim = table.dim;
    let mut out = vec![0.0; records.len() * rows * dim];
    let mut lens = Vec::with_capacity(records.len());
    for (b, rec) in records.iter().enumerate() {
        let (m, len) = embed_record(rec, table, rows)?;
        out[b * rows * dim..(b + 1) * rows * dim].copy_from_slice(m.data());
        lens.push(len);
    }
    Ok((Tensor::from_vec(&[records.len(), rows, dim], out)?, lens))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoded {
    Code(u32),
    End,
    Pad,
}

/// Cosine nearest-neighbour decoder with precomputed row norms.
pub struct Decoder<'a> {
    table: &'a EmbeddingTable,
    inv_norms: Vec<f64>,
}

impl<'a> Decoder<'a> {
    pub fn new(table: &'a EmbeddingTable) -> Decoder<'a> {
        let inv_norms = table
            .vectors
            .chunks(table.dim)
            .map(|row| {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    1.0 / n
                } else {
                    0.0
                }
            })
            .collect();
        Decoder { table, inv_norms }
    }

    /// Decode every row of a `[T, dim]` matrix. Zero-norm rows are `Pad`;
    /// ties in cosine resolve to the lowest row index (codes before END).
    pub fn decode_rows(&self, mat: &Tensor) -> Result<Vec<(Decoded, f64)>> {
        mat.expect_rank(2, "decode_rows")?;
        let (t, dim) = (mat.shape()[0], mat.shape()[1]);
        if dim != self.table.dim {
            return Err(Error::shape(format!(
                "decode_rows: {dim} columns vs embedding dim {}",
                self.table.dim
            )));
        }
        let rows = self.table.rows();
        // scores[t, r] = mat[t] . table[r]
        let mut scores = vec![0.0; t * rows];
        layers::gemm(
            t,
            dim,
            rows,
            mat.data(),
            dim as isize,
            1,
            &self.table.vectors,
            1,
            dim as isize,
            0.0,
            &mut scores,
        );
        let mut out = Vec::with_capacity(t);
        for ti in 0..t {
            let rnorm = mat.data()[ti * dim..(ti + 1) * dim]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if rnorm == 0.0 {
                out.push((Decoded::Pad, 0.0));
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            for ri in 0..rows {
                let cos = scores[ti * rows + ri] * self.inv_norms[ri] / rnorm;
                if cos > best {
                    best = cos;
                    best_idx = ri;
                }
            }
            let dec = if best_idx == self.table.end_index() {
                Decoded::End
            } else {
                Decoded::Code(best_idx as u32)
            };
            out.push((dec, best));
        }
        Ok(out)
    }

    pub fn nearest(&self, row: &[f64]) -> Result<(Decoded, f64)> {
        let mat = Tensor::from_vec(&[1, row.len()], row.to_vec())?;
        Ok(self.decode_rows(&mat)?[0])
    }
}

/// Save as a named-tensor container with provenance metadata.
pub fn save_embedding(path: &Path, table: &EmbeddingTable, seed: u64) -> Result<()> {
    save_embedding_with(path, table, seed, &[])
}

/// `save_embedding` plus extra metadata lines (pipeline provenance links).
pub fn save_embedding_with(
    path: &Path,
    table: &EmbeddingTable,
    seed: u64,
    extra: &[(&str, String)],
) -> Result<()> {
    let mut tensors = BTreeMap::new();
    tensors.insert(
        "vectors".to_string(),
        Tensor::from_vec(&[table.rows(), table.dim], table.vectors.clone())?,
    );
    let mut meta = format!(
        "kind=embedding\ncode={}\nvocab={}\ndim={}\nsource={}\nconfig={}\nseed={}\n",
        env!("CARGO_PKG_VERSION"),
        table.vocab_size,
        table.dim,
        table.source_hash,
        table.config_hash,
        seed,
    );
    for (k, v) in extra {
        meta.push_str(&format!("{k}={v}\n"));
    }
    checkpoint::save(path, &meta, &tensors)
}

pub fn load_embedding(path: &Path) -> Result<EmbeddingTable> {
    let (meta, mut tensors) = checkpoint::load(path)?;
    let kv = checkpoint::meta_map(&meta);
    let fail = |msg: String| Error::Format { path: path.display().to_string(), msg };
    if kv.get("kind").map(String::as_str) != Some("embedding") {
        return Err(fail(format!("kind={:?}, expected embedding", kv.get("kind"))));
    }
    let vocab: u32 = kv
        .get("vocab")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| fail("missing vocab".into()))?;
    let dim: usize = kv
        .get("dim")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| fail("missing dim".into()))?;
    let vectors = tensors
        .remove("vectors")
        .ok_or_else(|| fail("missing `vectors` tensor".into()))?;
    vectors.expect_shape(&[vocab as usize + 1, dim], "embedding vectors")?;
    Ok(EmbeddingTable {
        vocab_size: vocab,
        dim,
        vectors: vectors.into_data(),
        source_hash: kv.get("source").cloned().unwrap_or_default(),
        config_hash: kv.get("config").cloned().unwrap_or_default(),
    })
}

/// Human-readable export: one `label v0 v1 ...` line per row.
pub fn export_text(path: &Path, table: &EmbeddingTable, vocab: &crate::synth::Vocabulary) -> Result<()> {
    let mut s = String::new();
    for idx in 0..table.rows() {
        let label = if idx == table.end_index() {
            "END".to_string()
        } else {
            vocab.display(idx as u32)
        };
        let _ = write!(s, "{label}");
        for v in table.row(idx) {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, CohortSpec};

    fn tiny_cohort() -> Cohort {
        let spec = CohortSpec {
            cases: 30,
            controls: 30,
            vocab_size: 60,
            clusters: 6,
            cluster_size: 8,
            signature_clusters: 2,
            noise_rate: 0.05,
            seed: 9,
            ..CohortSpec::default()
        };
        synth::generate_cohort(&spec).unwrap().0
    }

    fn tiny_cfg() -> EmbedConfig {
        EmbedConfig { dim: 16, epochs: 2, ..EmbedConfig::default() }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn training_is_deterministic_and_loss_falls() {
        let cohort = tiny_cohort();
        let (t1, s1) = train_embedding(&cohort, &tiny_cfg(), 3).unwrap();
        let (t2, _) = train_embedding(&cohort, &tiny_cfg(), 3).unwrap();
        assert_eq!(t1.vectors, t2.vectors);
        assert!(
            s1.per_epoch_loss.last().unwrap() < s1.per_epoch_loss.first().unwrap(),
            "loss {:?}",
            s1.per_epoch_loss
        );
        let (t3, _) = train_embedding(&cohort, &tiny_cfg(), 4).unwrap();
        assert_ne!(t1.vectors, t3.vectors);
    }

    #[test]
    fn cluster_mates_are_closer_than_strangers() {
        let cohort = tiny_cohort();
        let cfg = EmbedConfig { dim: 16, epochs: 4, ..EmbedConfig::default() };
        let (table, _) = train_embedding(&cohort, &cfg, 3).unwrap();
        // cluster 0 owns codes {0, 6, 12, ...}; cluster 1 owns {1, 7, 13, ...}
        let same = cosine(table.row(0), table.row(6));
        let cross = cosine(table.row(0), table.row(1));
        assert!(
            same > cross,
            "within-cluster cosine {same:.3} should beat cross-cluster {cross:.3}"
        );
    }

    #[test]
    fn embed_record_layout_and_truncation() {
        let cohort = tiny_cohort();
        let (table, _) = train_embedding(&cohort, &tiny_cfg(), 3).unwrap();
        let rec = &cohort.records[0];
        let rows = 40; // shorter than the record: truncate to most recent 39
        let (mat, true_len) = embed_record(rec, &table, rows).unwrap();
        assert_eq!(mat.shape(), &[rows, table.dim()]);
        assert_eq!(true_len, 40);
        let dim = table.dim();
        let last_code = rec.events.last().unwrap().code as usize;
        assert_eq!(&mat.data()[38 * dim..39 * dim], table.row(last_code));
        assert_eq!(&mat.data()[39 * dim..40 * dim], table.row(table.end_index()));

        // plenty of room: events + END + zero padding
        let (mat2, len2) = embed_record(rec, &table, 300).unwrap();
        assert_eq!(len2, rec.events.len() + 1);
        assert!(mat2.data()[len2 * dim..].iter().all(|&v| v == 0.0));

        let bad = PatientRecord {
            id: 999,
            label: rec.label,
            events: vec![crate::synth::Event { window: 0, code: 9999 }],
        };
        assert!(embed_record(&bad, &table, 10).is_err());
    }

    #[test]
    fn decode_recovers_codes_end_and_pad() {
        let cohort = tiny_cohort();
        let (table, _) = train_embedding(&cohort, &tiny_cfg(), 3).unwrap();
        let dec = Decoder::new(&table);
        let dim = table.dim();
        let mut rows = Vec::new();
        rows.extend_from_slice(table.row(5));
        // scaled copy: cosine ignores magnitude
        rows.extend(table.row(5).iter().map(|v| v * 7.5));
        rows.extend_from_slice(table.row(table.end_index()));
        rows.extend(std::iter::repeat_n(0.0, dim));
        let mat = Tensor::from_vec(&[4, dim], rows).unwrap();
        let out = dec.decode_rows(&mat).unwrap();
        assert_eq!(out[0].0, Decoded::Code(5));
        assert!((out[0].1 - 1.0).abs() < 1e-9);
        assert_eq!(out[1].0, Decoded::Code(5));
        assert_eq!(out[2].0, Decoded::End);
        assert_eq!(out[3].0, Decoded::Pad);
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let cohort = tiny_cohort();
        let (table, _) = train_embedding(&cohort, &tiny_cfg(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.ntck");
        save_embedding(&p, &table, 3).unwrap();
        let loaded = load_embedding(&p).unwrap();
        assert_eq!(loaded.vocab_size(), table.vocab_size());
        assert_eq!(loaded.dim(), table.dim());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(loaded.vectors()), bits(table.vectors()));
        assert_eq!(loaded.source_hash, table.source_hash);
    }

    #[test]
    fn unseen_codes_are_reported() {
        // vocab much larger than what records use
        let spec = CohortSpec {
            cases: 5,
            controls: 5,
            vocab_size: 500,
            clusters: 4,
            cluster_size: 10,
            signature_clusters: 1,
            noise_rate: 0.0,
            seed: 2,
            ..CohortSpec::default()
        };
        let cohort = synth::generate_cohort(&spec).unwrap().0;
        let (_, stats) = train_embedding(&cohort, &tiny_cfg(), 1).unwrap();
        assert!(!stats.untrained_codes.is_empty());
    }
}
