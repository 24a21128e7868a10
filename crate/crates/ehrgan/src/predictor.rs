//! CNN risk predictor over embedded event sequences, and its training modes:
//! plain supervised (`Basic`), random-label control (`Rand`), extra real data
//! (`Full`), and GAN-augmented semi-supervised (`SslGan`).
//!
//! The augmented objective is
//!   mean L(x, y)  +  mu * mean L(x_tilde, y)
//! where each labeled example contributes `a` fresh draws x_tilde per epoch,
//! inheriting its label. `Rand` keeps the same added data volume but with
//! uniformly random labels; `Full` instead merges extra *real* labeled
//! records straight into the supervised mean.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::{embed_batch, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval;
use crate::rng;
use crate::synth::PatientRecord;
use crate::tensor::checkpoint;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::optim::{OptimConfig, ParamKind, ParamSet};
use crate::tensor::{layers, Tensor};

/// Longest sequence the predictor embeds (events + END; older events drop).
pub const PRED_MAX_ROWS: usize = 250;
/// Fixed sequence length on the generator side; augmenters embed at this.
pub const GAN_ROWS: usize = 150;

/// Parallel conv banks (one per filter width) -> ReLU -> max-over-time ->
/// concatenation. Shared by the predictor, the discriminator, and the
/// generator encoder; parameters live in whatever `ParamSet` the caller
/// passes, under entries `conv{w}/w` and `conv{w}/b`.
#[derive(Debug, Clone)]
pub struct ConvTrunk {
    pub widths: Vec<usize>,
    pub maps: usize,
    pub in_dim: usize,
}

impl ConvTrunk {
    pub fn new(widths: &[usize], maps: usize, in_dim: usize) -> Result<ConvTrunk> {
        if widths.is_empty() || maps == 0 || in_dim == 0 {
            return Err(Error::invalid("conv trunk: widths, maps, in_dim must be non-empty/non-zero"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("conv trunk: zero filter width"));
        }
        Ok(ConvTrunk { widths: widths.to_vec(), maps, in_dim })
    }

    pub fn out_dim(&self) -> usize {
        self.widths.len() * self.maps
    }

    /// Shortest time axis the trunk accepts (the widest filter).
    pub fn min_t(&self) -> usize {
        *self.widths.iter().max().expect("non-empty widths")
    }

    /// Insert fresh parameters under `{prefix}conv{w}/{w,b}`.
    pub fn init_params(&self, set: &mut ParamSet, prefix: &str, r: &mut impl Rng) -> Result<()> {
        for &w in &self.widths {
            let std = (2.0 / (w * self.in_dim) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            let data: Vec<f64> =
                (0..self.maps * w * self.in_dim).map(|_| dist.sample(r)).collect();
            set.insert(
                &format!("{prefix}conv{w}/w"),
                Tensor::from_vec(&[self.maps, w, self.in_dim], data)?,
                ParamKind::Weight,
            )?;
            set.insert(&format!("{prefix}conv{w}/b"), Tensor::zeros(&[self.maps]), ParamKind::Bias)?;
        }
        Ok(())
    }

    /// Tape version: `[B,T,in_dim] -> [B, out_dim]`.
    pub fn graph_forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        set: &ParamSet,
        prefix: &str,
    ) -> Result<NodeId> {
        let mut pooled = Vec::with_capacity(self.widths.len());
        for &w in &self.widths {
            let k = g.lease(set, &format!("{prefix}conv{w}/w"))?;
            let b = g.lease(set, &format!("{prefix}conv{w}/b"))?;
            let c = g.conv1d(x, k, b, 1)?;
            let r = g.relu(c);
            pooled.push(g.max_over_time(r)?);
        }
        g.concat_cols(&pooled)
    }

    /// Plain version for inference; bitwise-equal to the tape forward.
    pub fn forward(&self, x: &Tensor, set: &ParamSet, prefix: &str) -> Result<Tensor> {
        let b = x.shape()[0];
        let mut out = vec![0.0; b * self.out_dim()];
        let mut off = 0;
        for &w in &self.widths {
            let c = layers::conv1d(
                x,
                set.value(&format!("{prefix}conv{w}/w"))?,
                set.value(&format!("{prefix}conv{w}/b"))?,
                1,
            )?;
            let (p, _) = layers::max_over_time(&layers::relu(&c))?;
            for bi in 0..b {
                out[bi * self.out_dim() + off..bi * self.out_dim() + off + self.maps]
                    .copy_from_slice(&p.data()[bi * self.maps..(bi + 1) * self.maps]);
            }
            off += self.maps;
        }
        Tensor::from_vec(&[b, self.out_dim()], out)
    }
}

#[derive(Debug, Clone)]
pub struct PredictorConfig {
    pub widths: Vec<usize>,
    pub maps: usize,
    /// Always 2 here (case/control softmax head).
    pub classes: usize,
    pub embed_dim: usize,
    pub optim: OptimConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            widths: vec![3, 4, 5],
            maps: 100,
            classes: 2,
            embed_dim: 200,
            optim: OptimConfig::default(),
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.classes != 2 {
            return Err(Error::invalid(format!(
                "predictor: binary head only (classes = {})",
                self.classes
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("predictor: embed_dim must be > 0"));
        }
        ConvTrunk::new(&self.widths, self.maps, self.embed_dim).map(|_| ())
    }
}

pub struct PredictorModel {
    pub cfg: PredictorConfig,
    pub trunk: ConvTrunk,
    pub params: ParamSet,
}

impl PredictorModel {
    pub fn new(cfg: PredictorConfig, seed: u64) -> Result<PredictorModel> {
        cfg.validate()?;
        let trunk = ConvTrunk::new(&cfg.widths, cfg.maps, cfg.embed_dim)?;
        let mut params = ParamSet::new("predictor");
        let mut r = rng::substream(seed, "predictor/init");
        trunk.init_params(&mut params, "", &mut r)?;
        let d = trunk.out_dim();
        let std = (1.0 / d as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let head: Vec<f64> = (0..d * cfg.classes).map(|_| dist.sample(&mut r)).collect();
        params.insert("head/w", Tensor::from_vec(&[d, cfg.classes], head)?, ParamKind::Weight)?;
        params.insert("head/b", Tensor::zeros(&[cfg.classes]), ParamKind::Bias)?;
        Ok(PredictorModel { cfg, trunk, params })
    }

    /// `[B,T,M] -> [B,classes]` on the tape, leasing from `self.params`.
    pub fn graph_logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let feats = self.trunk.graph_forward(g, x, &self.params, "")?;
        let w = g.lease(&self.params, "head/w")?;
        let b = g.lease(&self.params, "head/b")?;
        g.dense(feats, w, b)
    }

    /// Plain inference logits.
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.trunk.forward(x, &self.params, "")?;
        layers::dense(&feats, self.params.value("head/w")?, self.params.value("head/b")?)
    }

    /// Row-wise class probabilities.
    pub fn forward_proba(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.forward_logits(x)?))
    }
}

/// Stable row-wise softmax of `[B,K]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0; b * k];
    for bi in 0..b {
        let row = &logits.data()[bi * k..(bi + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = (row[j] - m).exp();
            out[bi * k + j] = e;
            z += e;
        }
        for j in 0..k {
            out[bi * k + j] /= z;
        }
    }
    Tensor::from_vec(&[b, k], out).expect("shape preserved")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Basic,
    Rand,
    Full,
    SslGan,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Basic => "basic",
            TrainMode::Rand => "rand",
            TrainMode::Full => "full",
            TrainMode::SslGan => "ssl-gan",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "basic" => Ok(TrainMode::Basic),
            "rand" => Ok(TrainMode::Rand),
            "full" => Ok(TrainMode::Full),
            "ssl-gan" => Ok(TrainMode::SslGan),
            other => Err(Error::invalid(format!(
                "train mode `{other}` (want basic|rand|full|ssl-gan)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SslConfig {
    pub mode: TrainMode,
    /// Weight of the augmented loss term; 0 degenerates every mode to Basic.
    pub mu: f64,
    /// Augmentation draws per labeled example per epoch.
    pub a: usize,
    /// Fraction of the train split treated as labeled (consumed by the
    /// pipeline when slicing data; recorded here for provenance).
    pub labeled_fraction: f64,
    /// Fresh transition draws each epoch (true) or drawn once and reused
    /// (false); honored by the transition augmenter.
    pub resample_per_epoch: bool,
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-AUROC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            mode: TrainMode::Basic,
            mu: 0.6,
            a: 1,
            labeled_fraction: 0.5,
            resample_per_epoch: true,
            batch: 32,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::invalid(format!("ssl: mu {} must be finite and >= 0", self.mu)));
        }
        if self.a == 0 {
            return Err(Error::invalid("ssl: a must be >= 1"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "ssl: labeled_fraction {} must be in (0, 1]",
                self.labeled_fraction
            )));
        }
        if self.batch == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("ssl: batch, max_epochs, patience must be >= 1"));
        }
        Ok(())
    }
}

/// Source of weighted augmentation examples (`Rand` and `SslGan` modes).
/// One call serves one labeled minibatch and returns the same number of
/// examples as `[A, T, M]` plus their labels.
pub trait Augment {
    fn augment(
        &mut self,
        recs: &[&PatientRecord],
        labels: &[usize],
    ) -> Result<(Tensor, Vec<usize>)>;
}

/// `Rand` control: real unlabeled-pool records with uniformly random labels.
pub struct RandAugment<'a> {
    pool: Vec<&'a PatientRecord>,
    table: &'a EmbeddingTable,
    classes: usize,
    rng: rand_chacha::ChaCha12Rng,
}

impl<'a> RandAugment<'a> {
    pub fn new(
        pool: Vec<&'a PatientRecord>,
        table: &'a EmbeddingTable,
        classes: usize,
        seed: u64,
    ) -> Result<RandAugment<'a>> {
        if pool.is_empty() {
            return Err(Error::invalid("rand augment: empty pool"));
        }
        Ok(RandAugment { pool, table, classes, rng: rng::substream(seed, "augment/rand") })
    }
}

impl Augment for RandAugment<'_> {
    fn augment(
        &mut self,
        recs: &[&PatientRecord],
        _labels: &[usize],
    ) -> Result<(Tensor, Vec<usize>)> {
        let picks: Vec<&PatientRecord> = (0..recs.len())
            .map(|_| self.pool[self.rng.random_range(0..self.pool.len())])
            .collect();
        let labels = (0..recs.len()).map(|_| self.rng.random_range(0..self.classes)).collect();
        let (x, _) = embed_batch(&picks, self.table, GAN_ROWS)?;
        Ok((x, labels))
    }
}

#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    /// (record, class index) pairs the model trains on.
    pub labeled: Vec<(&'a PatientRecord, usize)>,
    /// Validation set for early stopping.
    pub val: Vec<(&'a PatientRecord, usize)>,
    /// Extra real labeled records for `Full` mode; ignored otherwise.
    pub full_pool: Vec<(&'a PatientRecord, usize)>,
    pub table: &'a EmbeddingTable,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub sup_loss: f64,
    pub aug_loss: f64,
    pub train_accuracy: f64,
    pub train_auroc: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Line-delimited metric records: `epoch  split  loss  accuracy  auroc`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tsplit\tloss\taccuracy\tauroc\n");
        for r in &self.records {
            s.push_str(&format!(
                "{}\ttrain\t{:.6}\t{:.6}\t{:.6}\n{}\tval\t{:.6}\t{:.6}\t{:.6}\n",
                r.epoch, r.train_loss, r.train_accuracy, r.train_auroc, r.epoch, r.val_loss,
                r.val_accuracy, r.val_auroc,
            ));
        }
        s
    }
}

/// Rows for one minibatch: longest record (+ END), clamped to the trunk's
/// minimum and the predictor cap.
fn batch_rows(recs: &[&PatientRecord], min_t: usize) -> usize {
    let longest = recs.iter().map(|r| r.events.len()).max().unwrap_or(0);
    (longest.min(PRED_MAX_ROWS - 1) + 1).max(min_t)
}

/// Mean loss, P(case), and accuracy over a labeled set, in inference mode.
fn eval_split(
    model: &PredictorModel,
    items: &[(&PatientRecord, usize)],
    table: &EmbeddingTable,
) -> Result<(f64, Vec<f64>, f64)> {
    let mut loss_sum = 0.0;
    let mut probs = Vec::with_capacity(items.len());
    for chunk in items.chunks(64) {
        let recs: Vec<&PatientRecord> = chunk.iter().map(|&(r, _)| r).collect();
        let labels: Vec<usize> = chunk.iter().map(|&(_, y)| y).collect();
        let rows = batch_rows(&recs, model.trunk.min_t());
        let (x, _) = embed_batch(&recs, table, rows)?;
        let logits = model.forward_logits(&x)?;
        let (loss, p) = layers::softmax_xent(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        for bi in 0..chunk.len() {
            probs.push(p.data()[bi * model.cfg.classes + 1]);
        }
    }
    let labels_b: Vec<bool> = items.iter().map(|&(_, y)| y == 1).collect();
    let acc = eval::accuracy(&probs, &labels_b)?;
    Ok((loss_sum / items.len() as f64, probs, acc))
}

/// Train under the configured mode. `aug` supplies weighted augmentation
/// examples for `Rand`/`SslGan` (required when `mu > 0`); `Full` instead
/// draws from `data.full_pool`, merging `round(mu * batch)` extra real
/// records into each supervised mean. With `mu = 0` every mode follows the
/// exact `Basic` code path, so trajectories are bitwise identical.
pub fn train(
    model: &mut PredictorModel,
    data: &TrainData,
    cfg: &SslConfig,
    mut aug: Option<&mut dyn Augment>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.labeled.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("train: labeled and val sets must be non-empty"));
    }
    let weighted = cfg.mu > 0.0 && matches!(cfg.mode, TrainMode::Rand | TrainMode::SslGan);
    let merging = cfg.mu > 0.0 && cfg.mode == TrainMode::Full;
    if weighted && aug.is_none() {
        return Err(Error::invalid(format!(
            "train: mode {} with mu > 0 needs an augmentation source",
            cfg.mode.name()
        )));
    }
    if merging && data.full_pool.is_empty() {
        return Err(Error::invalid("train: full mode with mu > 0 needs a non-empty pool"));
    }

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, BTreeMap<String, Tensor>, usize)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.labeled.len()).collect();
        order.shuffle(&mut rng::substream_indexed(cfg.seed, "predictor/shuffle", epoch as u64));
        let mut pool_order: Vec<usize> = (0..data.full_pool.len()).collect();
        if merging {
            pool_order
                .shuffle(&mut rng::substream_indexed(cfg.seed, "predictor/pool", epoch as u64));
        }
        let mut pool_pos = 0usize;

        let mut sup_probs = Vec::with_capacity(data.labeled.len());
        let mut sup_labels = Vec::with_capacity(data.labeled.len());
        let (mut loss_sum, mut sup_sum, mut aug_sum, mut n_sum) = (0.0, 0.0, 0.0, 0usize);

        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut recs: Vec<&PatientRecord> =
                chunk.iter().map(|&i| data.labeled[i].0).collect();
            let mut labels: Vec<usize> = chunk.iter().map(|&i| data.labeled[i].1).collect();
            let sup_n = recs.len();
            if merging {
                let extra = (cfg.mu * sup_n as f64).round() as usize;
                for _ in 0..extra {
                    if pool_pos == pool_order.len() {
                        pool_pos = 0; // wrap within the epoch
                    }
                    let (r, y) = data.full_pool[pool_order[pool_pos]];
                    pool_pos += 1;
                    recs.push(r);
                    labels.push(y);
                }
            }

            let rows = batch_rows(&recs, model.trunk.min_t());
            let (x, _) = embed_batch(&recs, data.table, rows)?;
            let mut g = Graph::new();
            let xn = g.input(x);
            let logits = model.graph_logits(&mut g, xn)?;
            let sup_loss = g.softmax_xent(logits, &labels)?;
            let sup_val = g.value(sup_loss).item();

            let (mut total, mut aug_val) = (sup_loss, 0.0);
            if weighted {
                let src = aug.as_mut().expect("checked above");
                let sup_recs = &recs[..sup_n];
                let sup_lab = &labels[..sup_n];
                let (ax, alab) = gather_draws(&mut **src, sup_recs, sup_lab, cfg.a)?;
                let an = g.input(ax);
                let alogits = model.graph_logits(&mut g, an)?;
                let aloss = g.softmax_xent(alogits, &alab)?;
                aug_val = g.value(aloss).item();
                let scaled = g.scale(aloss, cfg.mu);
                total = g.add(sup_loss, scaled)?;
            }
            let total_val = g.value(total).item();
            if !total_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "train: epoch {epoch} batch {bi}: loss {total_val} (sup {sup_val}, aug {aug_val})"
                )));
            }
            g.backward(total)?;
            model.params.accumulate(&g.param_grads())?;
            model.params.clip_and_step(&model.cfg.optim).map_err(|e| {
                Error::invalid(format!("train: epoch {epoch} batch {bi}: {e}"))
            })?;

            let p = softmax_rows(g.value(logits));
            for (i, &label) in labels.iter().enumerate().take(sup_n) {
                sup_probs.push(p.data()[i * model.cfg.classes + 1]);
                sup_labels.push(label == 1);
            }
            loss_sum += total_val * sup_n as f64;
            sup_sum += sup_val * sup_n as f64;
            aug_sum += aug_val * sup_n as f64;
            n_sum += sup_n;
        }

        let (val_loss, val_probs, val_acc) = eval_split(model, &data.val, data.table)?;
        let val_labels: Vec<bool> = data.val.iter().map(|&(_, y)| y == 1).collect();
        let val_auroc = eval::auroc(&val_probs, &val_labels)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_sum as f64,
            sup_loss: sup_sum / n_sum as f64,
            aug_loss: aug_sum / n_sum as f64,
            train_accuracy: eval::accuracy(&sup_probs, &sup_labels)?,
            train_auroc: eval::auroc(&sup_probs, &sup_labels)?,
            val_loss,
            val_accuracy: val_acc,
            val_auroc,
        });

        if best.as_ref().is_none_or(|(b, _, _)| val_auroc > *b) {
            best = Some((val_auroc, model.params.values_map(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    let (best_auroc, best_vals, best_epoch) = best.expect("at least one epoch ran");
    model.params.set_values(&best_vals)?;
    history.best_epoch = best_epoch;
    history.best_val_auroc = best_auroc;
    Ok(history)
}

/// `a` augmentation draws for one minibatch, stacked along the batch axis.
fn gather_draws(
    src: &mut dyn Augment,
    recs: &[&PatientRecord],
    labels: &[usize],
    a: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (first, mut alab) = src.augment(recs, labels)?;
    if a == 1 {
        return Ok((first, alab));
    }
    let (b, t, m) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let mut data = Vec::with_capacity(a * b * t * m);
    data.extend_from_slice(first.data());
    for _ in 1..a {
        let (x, mut l) = src.augment(recs, labels)?;
        x.expect_shape(&[b, t, m], "augment draw")?;
        data.extend_from_slice(x.data());
        alab.append(&mut l);
    }
    Ok((Tensor::from_vec(&[a * b, t, m], data)?, alab))
}

/// P(case) per record, batched; deterministic.
pub fn predict_proba(
    model: &PredictorModel,
    recs: &[&PatientRecord],
    table: &EmbeddingTable,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(recs.len());
    for chunk in recs.chunks(64) {
        let rows = batch_rows(chunk, model.trunk.min_t());
        let (x, _) = embed_batch(chunk, table, rows)?;
        let p = model.forward_proba(&x)?;
        for bi in 0..chunk.len() {
            out.push(p.data()[bi * model.cfg.classes + 1]);
        }
    }
    Ok(out)
}

/// Test AUROC of a trained model over labeled records.
pub fn score_auroc(
    model: &PredictorModel,
    items: &[(&PatientRecord, usize)],
    table: &EmbeddingTable,
) -> Result<f64> {
    let recs: Vec<&PatientRecord> = items.iter().map(|&(r, _)| r).collect();
    let probs = predict_proba(model, &recs, table)?;
    let labels: Vec<bool> = items.iter().map(|&(_, y)| y == 1).collect();
    eval::auroc(&probs, &labels)
}

/// Inference checkpoint (parameter values only; optimizer state resets).
pub fn save_predictor(path: &std::path::Path, model: &PredictorModel, seed: u64) -> Result<()> {
    save_predictor_with(path, model, seed, &[])
}

/// `save_predictor` plus extra metadata lines (pipeline provenance links).
pub fn save_predictor_with(
    path: &std::path::Path,
    model: &PredictorModel,
    seed: u64,
    extra: &[(&str, String)],
) -> Result<()> {
    let widths: Vec<String> = model.cfg.widths.iter().map(|w| w.to_string()).collect();
    let mut meta = format!(
        "kind=predictor\nwidths={}\nmaps={}\nclasses={}\nembed_dim={}\nseed={}\n",
        widths.join(","),
        model.cfg.maps,
        model.cfg.classes,
        model.cfg.embed_dim,
        seed,
    );
    for (k, v) in extra {
        meta.push_str(&format!("{k}={v}\n"));
    }
    checkpoint::save(path, &meta, &model.params.values_map())
}

pub fn load_predictor(path: &std::path::Path) -> Result<PredictorModel> {
    let (meta, tensors) = checkpoint::load(path)?;
    let kv = checkpoint::meta_map(&meta);
    let get = |k: &str| {
        kv.get(k).cloned().ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            msg: format!("predictor checkpoint lacks meta `{k}`"),
        })
    };
    if get("kind")? != "predictor" {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: "not a predictor checkpoint".into(),
        });
    }
    let widths: Vec<usize> = get("widths")?
        .split(',')
        .map(|t| t.parse().map_err(|_| Error::Format {
            path: path.display().to_string(),
            msg: format!("bad widths entry `{t}`"),
        }))
        .collect::<Result<_>>()?;
    let parse = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Format {
            path: path.display().to_string(),
            msg: format!("bad meta `{k}`"),
        })
    };
    let cfg = PredictorConfig {
        widths,
        maps: parse("maps")?,
        classes: parse("classes")?,
        embed_dim: parse("embed_dim")?,
        optim: OptimConfig::default(),
    };
    let mut model = PredictorModel::new(cfg, 0)?;
    model.params.set_values(&tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{train_embedding, EmbedConfig};
    use crate::synth::{Cohort, Event, Label, Split, Vocabulary};
    use crate::tensor::check;

    const DIM: usize = 6;

    fn toy_record(id: u64, label: Label, code: u32, len: usize) -> PatientRecord {
        let events = (0..len)
            .map(|i| Event { window: (i / 4) as u16, code: if i % 3 == 0 { code } else { 2 + (i as u32 % 4) } })
            .collect();
        PatientRecord { id, label, events }
    }

    /// Tiny cohort where label is readable off code presence (0 vs 1).
    fn toy_setup(n_per_class: usize) -> (Cohort, EmbeddingTable) {
        let mut records = Vec::new();
        for i in 0..n_per_class {
            records.push(toy_record(2 * i as u64, Label::Case, 0, 8 + i % 5));
            records.push(toy_record(2 * i as u64 + 1, Label::Control, 1, 8 + i % 5));
        }
        let splits = vec![Split::Train; records.len()];
        let cohort = Cohort {
            records,
            splits,
            vocab: Vocabulary::new(6),
            spec_hash: "toy".into(),
            seed: 3,
        };
        let cfg = EmbedConfig { dim: DIM, window: 3, negatives: 2, epochs: 2, lr: 0.05 };
        let (table, _) = train_embedding(&cohort, &cfg, 11).unwrap();
        (cohort, table)
    }

    fn tiny_cfg() -> PredictorConfig {
        PredictorConfig {
            widths: vec![2, 3],
            maps: 4,
            classes: 2,
            embed_dim: DIM,
            optim: OptimConfig { lr: 0.01, ..OptimConfig::default() },
        }
    }

    fn pairs(cohort: &Cohort) -> Vec<(&PatientRecord, usize)> {
        cohort.records.iter().map(|r| (r, r.label.class_index())).collect()
    }

    #[test]
    fn softmax_rows_sum_to_one_and_duplicates_match() {
        let model = PredictorModel::new(tiny_cfg(), 1).unwrap();
        let mut data = vec![0.0; 2 * 7 * DIM];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) / 7.0;
        }
        let half = data[..7 * DIM].to_vec();
        let mut x = half.clone();
        x.extend_from_slice(&half); // duplicate example
        let p = model.forward_proba(&Tensor::from_vec(&[2, 7, DIM], x).unwrap()).unwrap();
        let row0: Vec<f64> = p.data()[..2].to_vec();
        let row1: Vec<f64> = p.data()[2..].to_vec();
        assert_eq!(row0, row1);
        assert!((row0[0] + row0[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_input_gives_bias_logits_independent_of_length() {
        let model = PredictorModel::new(tiny_cfg(), 2).unwrap();
        let a = model.forward_logits(&Tensor::zeros(&[1, 7, DIM])).unwrap();
        let b = model.forward_logits(&Tensor::zeros(&[1, 12, DIM])).unwrap();
        assert_eq!(a.data(), b.data());
        // zero conv activations, zero-init biases -> logits are head bias (0)
        assert!(a.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn graph_and_plain_forward_agree_bitwise() {
        let model = PredictorModel::new(tiny_cfg(), 3).unwrap();
        let x: Vec<f64> = (0..3 * 9 * DIM).map(|i| ((i * 17 % 23) as f64 - 11.0) / 9.0).collect();
        let t = Tensor::from_vec(&[3, 9, DIM], x).unwrap();
        let plain = model.forward_logits(&t).unwrap();
        let mut g = Graph::new();
        let xn = g.input(t);
        let ln = model.graph_logits(&mut g, xn).unwrap();
        assert_eq!(g.value(ln).data(), plain.data());
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        let model = PredictorModel::new(tiny_cfg(), 4).unwrap();
        assert!(model.forward_logits(&Tensor::zeros(&[1, 2, DIM])).is_err());
    }

    /// Pad rows can only shrink nothing: with positive kernels and a dominant
    /// spike row, appending zeros leaves the pooled features unchanged.
    #[test]
    fn zero_padding_keeps_pooled_features_when_spike_dominates() {
        let mut model = PredictorModel::new(tiny_cfg(), 5).unwrap();
        for w in [2usize, 3] {
            let entry = format!("conv{w}/w");
            let t = model.params.value_mut(&entry).unwrap();
            for v in t.data_mut() {
                *v = 0.05 + v.abs() % 0.1;
            }
        }
        let mut x = vec![0.2; 8 * DIM];
        for v in &mut x[3 * DIM..4 * DIM] {
            *v = 10.0;
        }
        let mut padded = x.clone();
        padded.extend(std::iter::repeat_n(0.0, 4 * DIM));
        let a = model
            .trunk
            .forward(&Tensor::from_vec(&[1, 8, DIM], x).unwrap(), &model.params, "")
            .unwrap();
        let b = model
            .trunk
            .forward(&Tensor::from_vec(&[1, 12, DIM], padded).unwrap(), &model.params, "")
            .unwrap();
        assert_eq!(a.data(), b.data());
    }

    /// Fixed-tensor augmenter: deterministic across calls, so finite
    /// differences see the same objective the tape differentiated.
    struct FixedAug {
        x: Tensor,
        labels: Vec<usize>,
        calls: usize,
    }

    impl Augment for FixedAug {
        fn augment(
            &mut self,
            _recs: &[&PatientRecord],
            _labels: &[usize],
        ) -> Result<(Tensor, Vec<usize>)> {
            self.calls += 1;
            Ok((self.x.clone(), self.labels.clone()))
        }
    }

    #[test]
    fn augmented_objective_gradient_matches_finite_differences() {
        let model = PredictorModel::new(tiny_cfg(), 6).unwrap();
        let mut params = model.params.clone();
        let x: Vec<f64> = (0..4 * 7 * DIM).map(|i| ((i * 13 % 19) as f64 - 9.0) / 8.0).collect();
        let ax: Vec<f64> = (0..4 * 6 * DIM).map(|i| ((i * 7 % 17) as f64 - 8.0) / 6.0).collect();
        let labels = [0usize, 1, 1, 0];
        let alabels = [1usize, 0, 1, 0];
        let mu = 0.7;

        let run = |set: &ParamSet| -> Result<(f64, Option<BTreeMap<String, Tensor>>)> {
            let trunk = ConvTrunk::new(&[2, 3], 4, DIM)?;
            let mut g = Graph::new();
            let xn = g.input(Tensor::from_vec(&[4, 7, DIM], x.clone())?);
            let feats = trunk.graph_forward(&mut g, xn, set, "")?;
            let (w, b) = (g.lease(set, "head/w")?, g.lease(set, "head/b")?);
            let logits = g.dense(feats, w, b)?;
            let sup = g.softmax_xent(logits, &labels)?;
            let an = g.input(Tensor::from_vec(&[4, 6, DIM], ax.clone())?);
            let afeats = trunk.graph_forward(&mut g, an, set, "")?;
            let alogits = g.dense(afeats, w, b)?;
            let aloss = g.softmax_xent(alogits, &alabels)?;
            let scaled = g.scale(aloss, mu);
            let total = g.add(sup, scaled)?;
            let v = g.value(total).item();
            g.backward(total)?;
            Ok((v, Some(g.param_grads())))
        };

        let (loss, grads) = run(&params).unwrap();
        // decomposition: total = sup + mu * aug, recomputed off-tape
        let sup = {
            let logits = {
                let trunk = ConvTrunk::new(&[2, 3], 4, DIM).unwrap();
                let f = trunk
                    .forward(&Tensor::from_vec(&[4, 7, DIM], x.clone()).unwrap(), &params, "")
                    .unwrap();
                layers::dense(&f, params.value("head/w").unwrap(), params.value("head/b").unwrap())
                    .unwrap()
            };
            layers::softmax_xent(&logits, &labels).unwrap().0
        };
        let aug = {
            let trunk = ConvTrunk::new(&[2, 3], 4, DIM).unwrap();
            let f = trunk
                .forward(&Tensor::from_vec(&[4, 6, DIM], ax.clone()).unwrap(), &params, "")
                .unwrap();
            let logits = layers::dense(
                &f,
                params.value("head/w").unwrap(),
                params.value("head/b").unwrap(),
            )
            .unwrap();
            layers::softmax_xent(&logits, &alabels).unwrap().0
        };
        assert!((loss - (sup + mu * aug)).abs() < 1e-10);

        let numeric =
            check::central_diff_params(&mut params, check::FD_STEP, |p| run(p).map(|(v, _)| v))
                .unwrap();
        let report = check::compare_grads(&grads.unwrap(), &numeric, "predictor");
        assert!(
            report.max_rel <= check::FD_REL_TOL,
            "FD mismatch: {report:?}"
        );
    }

    #[test]
    fn basic_training_learns_separable_toy_task_and_is_reproducible() {
        let (cohort, table) = toy_setup(24);
        let items = pairs(&cohort);
        let data = TrainData {
            labeled: items[..32].to_vec(),
            val: items[32..].to_vec(),
            full_pool: vec![],
            table: &table,
        };
        let cfg = SslConfig {
            batch: 8,
            max_epochs: 6,
            patience: 6,
            seed: 13,
            ..SslConfig::default()
        };
        let mut m1 = PredictorModel::new(tiny_cfg(), 21).unwrap();
        let h1 = train(&mut m1, &data, &cfg, None).unwrap();
        assert!(h1.best_val_auroc > 0.95, "toy task should be learned: {h1:?}");
        assert_eq!(h1.records.len(), 6);
        let tsv = h1.to_tsv();
        assert!(tsv.lines().count() == 1 + 2 * h1.records.len());

        let mut m2 = PredictorModel::new(tiny_cfg(), 21).unwrap();
        let h2 = train(&mut m2, &data, &cfg, None).unwrap();
        assert_eq!(m1.params.values_map(), m2.params.values_map());
        assert_eq!(h1.records.len(), h2.records.len());
    }

    /// An augmenter that must never be consulted.
    struct PanicAug;
    impl Augment for PanicAug {
        fn augment(
            &mut self,
            _recs: &[&PatientRecord],
            _labels: &[usize],
        ) -> Result<(Tensor, Vec<usize>)> {
            panic!("augment called with mu = 0");
        }
    }

    #[test]
    fn mu_zero_is_bitwise_basic_for_every_mode() {
        let (cohort, table) = toy_setup(12);
        let items = pairs(&cohort);
        let data = TrainData {
            labeled: items[..16].to_vec(),
            val: items[16..].to_vec(),
            full_pool: items[..8].to_vec(),
            table: &table,
        };
        let base_cfg = SslConfig { batch: 8, max_epochs: 3, seed: 5, ..SslConfig::default() };

        let mut basic = PredictorModel::new(tiny_cfg(), 9).unwrap();
        train(&mut basic, &data, &SslConfig { mode: TrainMode::Basic, ..base_cfg.clone() }, None)
            .unwrap();
        let want = basic.params.values_map();

        for mode in [TrainMode::SslGan, TrainMode::Rand, TrainMode::Full] {
            let cfg = SslConfig { mode, mu: 0.0, ..base_cfg.clone() };
            let mut m = PredictorModel::new(tiny_cfg(), 9).unwrap();
            let mut aug = PanicAug;
            train(&mut m, &data, &cfg, Some(&mut aug)).unwrap();
            assert_eq!(m.params.values_map(), want, "mode {} diverged", mode.name());
        }
    }

    #[test]
    fn full_mode_merges_pool_records() {
        let (cohort, table) = toy_setup(16);
        let items = pairs(&cohort);
        let data = TrainData {
            labeled: items[..16].to_vec(),
            val: items[24..].to_vec(),
            full_pool: items[16..24].to_vec(),
            table: &table,
        };
        let cfg = SslConfig {
            mode: TrainMode::Full,
            mu: 1.0,
            batch: 8,
            max_epochs: 3,
            seed: 7,
            ..SslConfig::default()
        };
        let mut m = PredictorModel::new(tiny_cfg(), 15).unwrap();
        let h = train(&mut m, &data, &cfg, None).unwrap();
        assert!(h.records.iter().all(|r| r.train_loss.is_finite()));
        // merged records enter the supervised mean, not a weighted aux term
        assert!(h.records.iter().all(|r| r.aug_loss == 0.0));
    }

    #[test]
    fn weighted_modes_consume_the_augmenter() {
        let (cohort, table) = toy_setup(12);
        let items = pairs(&cohort);
        let data = TrainData {
            labeled: items[..16].to_vec(),
            val: items[16..].to_vec(),
            full_pool: vec![],
            table: &table,
        };
        let cfg = SslConfig {
            mode: TrainMode::SslGan,
            mu: 0.5,
            batch: 8,
            max_epochs: 2,
            seed: 3,
            ..SslConfig::default()
        };
        let mut aug = FixedAug {
            x: Tensor::filled(&[8, 6, DIM], 0.1),
            labels: vec![0, 1, 0, 1, 0, 1, 0, 1],
            calls: 0,
        };
        let mut m = PredictorModel::new(tiny_cfg(), 30).unwrap();
        let h = train(&mut m, &data, &cfg, Some(&mut aug)).unwrap();
        assert_eq!(aug.calls, 2 * 2); // 2 batches/epoch x 2 epochs
        assert!(h.records.iter().all(|r| r.aug_loss > 0.0));

        // missing augmenter is an error when mu > 0
        let mut m2 = PredictorModel::new(tiny_cfg(), 30).unwrap();
        assert!(train(&mut m2, &data, &cfg, None).is_err());
    }

    #[test]
    fn early_stopping_restores_best_parameters() {
        let (cohort, table) = toy_setup(12);
        let items = pairs(&cohort);
        // noisy val labels so improvement stalls fast (keep both classes)
        let mut val = items[16..].to_vec();
        for (i, v) in val.iter_mut().enumerate() {
            if i % 4 == 0 {
                v.1 = 1 - v.1;
            }
        }
        let data =
            TrainData { labeled: items[..16].to_vec(), val, full_pool: vec![], table: &table };
        let cfg = SslConfig {
            batch: 8,
            max_epochs: 40,
            patience: 2,
            seed: 1,
            ..SslConfig::default()
        };
        let mut m = PredictorModel::new(tiny_cfg(), 40).unwrap();
        let h = train(&mut m, &data, &cfg, None).unwrap();
        assert!(h.stopped_early);
        assert!(h.records.len() < 40);
        assert_eq!(h.best_epoch + cfg.patience + 1, h.records.len());
        let best = h.records.iter().map(|r| r.val_auroc).fold(f64::MIN, f64::max);
        assert_eq!(best, h.best_val_auroc);
    }

    #[test]
    fn rand_augment_draws_pool_records_with_random_labels() {
        let (cohort, table) = toy_setup(12);
        let pool: Vec<&PatientRecord> = cohort.records.iter().collect();
        let mut aug = RandAugment::new(pool, &table, 2, 99).unwrap();
        let recs: Vec<&PatientRecord> = cohort.records.iter().take(6).collect();
        let labels = vec![1usize; 6];
        let (x, alab) = aug.augment(&recs, &labels).unwrap();
        assert_eq!(x.shape(), &[6, GAN_ROWS, DIM]);
        assert_eq!(alab.len(), 6);
        assert!(alab.iter().all(|&l| l < 2));
        // not a copy of the source labels on average: run a few draws
        let mut seen_zero = false;
        for _ in 0..5 {
            let (_, l) = aug.augment(&recs, &labels).unwrap();
            seen_zero |= l.contains(&0);
        }
        assert!(seen_zero, "random labels never produced class 0");
    }

    #[test]
    fn predict_proba_checks_vocabulary() {
        let (cohort, table) = toy_setup(8);
        let model = PredictorModel::new(tiny_cfg(), 2).unwrap();
        let bad = PatientRecord {
            id: 999,
            label: Label::Case,
            events: vec![Event { window: 0, code: 600 }; 8],
        };
        assert!(predict_proba(&model, &[&bad], &table).is_err());
        let ok: Vec<&PatientRecord> = cohort.records.iter().collect();
        let p = predict_proba(&model, &ok, &table).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.ntck");
        let model = PredictorModel::new(tiny_cfg(), 77).unwrap();
        save_predictor(&path, &model, 77).unwrap();
        let back = load_predictor(&path).unwrap();
        assert_eq!(back.params.values_map(), model.params.values_map());
        assert_eq!(back.cfg.widths, model.cfg.widths);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PredictorConfig { classes: 3, ..tiny_cfg() }.validate().is_err());
        assert!(PredictorConfig { widths: vec![], ..tiny_cfg() }.validate().is_err());
        assert!(SslConfig { mu: -0.1, ..SslConfig::default() }.validate().is_err());
        assert!(SslConfig { a: 0, ..SslConfig::default() }.validate().is_err());
        assert!(SslConfig { labeled_fraction: 0.0, ..SslConfig::default() }.validate().is_err());
        assert!(TrainMode::parse("bogus").is_err());
        assert_eq!(TrainMode::parse("ssl-gan").unwrap(), TrainMode::SslGan);
    }
}
