//! Transition GAN over embedded event sequences.
//!
//! The generator is an encoder-decoder pair: strided convolutions encode a
//! real sequence matrix x into h, a Bernoulli mask swaps a random subset of
//! h's coordinates for Gaussian noise (h_tilde = m*z + (1-m)*h), and a
//! deconv decoder maps the result back to a sequence matrix x_tilde.
//! Encoder and decoder are exact mirrors (conv stride 3 / stride 1 down,
//! deconv stride 1 / stride 3 up) so position and sequence length survive
//! the round trip — a max-pooled encoder cannot carry either, and the
//! reconstruction term then has nothing to anchor to. Training minimizes
//!   rho * mean(-log D(x_tilde)) + (1 - rho) * mean((dec(h) - x)^2)
//! for the generator (adversarial realism vs. reconstruction proximity) and
//! smoothed real/fake binary cross-entropy plus an L2 penalty for the
//! discriminator, with several generator steps per discriminator step.
//! Because x_tilde is anchored to a real x, sampling produces neighbors of
//! the training examples rather than decoding pure noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::embedding::{embed_batch, Decoded, Decoder, EmbeddingTable};
use crate::error::{Error, Result};
use crate::predictor::{Augment, ConvTrunk};
use crate::rng;
use crate::synth::{Event, Label, PatientRecord};
use crate::tensor::checkpoint;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::optim::{OptimConfig, ParamKind, ParamSet};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct GanConfig {
    /// Eq-style trade-off: adversarial weight rho, reconstruction 1 - rho.
    pub rho: f64,
    /// Generator updates per discriminator update.
    pub inner_steps: usize,
    pub latent: usize,
    /// Probability a latent coordinate is replaced by noise.
    pub mask_p: f64,
    /// Fixed generated sequence length (must be divisible by 3; the decoder
    /// upsamples seq_rows/3 - 2 -> seq_rows/3 -> seq_rows).
    pub seq_rows: usize,
    pub embed_dim: usize,
    pub widths: Vec<usize>,
    /// Feature maps per conv width; also the decoder channel count.
    pub maps: usize,
    /// One-sided label smoothing target for real examples.
    pub smooth: f64,
    /// Batch-norm the decoder's two intermediate maps. Off by default: the
    /// running-stat gap between training batches and single-record sampling
    /// measurably degrades decoded output, and identical train/sample paths
    /// are easier to reason about.
    pub batch_norm: bool,
    pub batch: usize,
    pub max_iterations: usize,
    /// Stop once both mean discriminator outputs sit within converge_tol of
    /// 1/2 for this many consecutive iterations.
    pub converge_window: usize,
    pub converge_tol: f64,
    pub optim: OptimConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            rho: 0.1,
            inner_steps: 5,
            latent: 100,
            mask_p: 0.5,
            seq_rows: 150,
            embed_dim: 200,
            widths: vec![3, 4, 5],
            maps: 100,
            smooth: 0.9,
            batch_norm: false,
            batch: 8,
            max_iterations: 2000,
            converge_window: 100,
            converge_tol: 0.02,
            // optim.l2 feeds the discriminator loss; the generator ignores it
            optim: OptimConfig { l2: 1e-4, ..OptimConfig::default() },
        }
    }
}

impl GanConfig {
    /// Decoder time axis before upsampling.
    fn t0(&self) -> usize {
        self.seq_rows / 3 - 2
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if !(self.rho.is_finite() && (0.0..=1.0).contains(&self.rho)) {
            return Err(Error::invalid(format!("gan: rho {} must be in [0,1]", self.rho)));
        }
        if !(self.mask_p.is_finite() && (0.0..=1.0).contains(&self.mask_p)) {
            return Err(Error::invalid(format!("gan: mask_p {} must be in [0,1]", self.mask_p)));
        }
        if !(self.smooth.is_finite() && self.smooth > 0.0 && self.smooth <= 1.0) {
            return Err(Error::invalid(format!("gan: smooth {} must be in (0,1]", self.smooth)));
        }
        if self.latent == 0 || self.batch == 0 || self.inner_steps == 0 {
            return Err(Error::invalid("gan: latent, batch, inner_steps must be >= 1"));
        }
        if self.converge_window == 0 || !(self.converge_tol.is_finite() && self.converge_tol > 0.0)
        {
            return Err(Error::invalid("gan: bad convergence settings"));
        }
        let trunk = ConvTrunk::new(&self.widths, self.maps, self.embed_dim)?;
        if !self.seq_rows.is_multiple_of(3) || self.seq_rows / 3 < 3 {
            return Err(Error::invalid(format!(
                "gan: seq_rows {} must be a multiple of 3, at least 9",
                self.seq_rows
            )));
        }
        if self.seq_rows < trunk.min_t() {
            return Err(Error::invalid(format!(
                "gan: seq_rows {} shorter than widest filter {}",
                self.seq_rows,
                trunk.min_t()
            )));
        }
        Ok(())
    }
}

/// Running batch-norm statistics for the decoder's two normalized maps
/// (post-reshape and post-deconv1).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean1: Vec<f64>,
    pub var1: Vec<f64>,
    pub mean2: Vec<f64>,
    pub var2: Vec<f64>,
}

impl BnStats {
    fn fresh(maps: usize) -> BnStats {
        BnStats {
            mean1: vec![0.0; maps],
            var1: vec![1.0; maps],
            mean2: vec![0.0; maps],
            var2: vec![1.0; maps],
        }
    }
}

#[derive(Clone)]
pub struct GanModel {
    pub cfg: GanConfig,
    pub gen: ParamSet,
    pub disc: ParamSet,
    /// Per-dimension scale of the decoder's tanh output, taken from the
    /// training embedding table so generated rows live in its value range.
    pub out_scale: Vec<f64>,
    pub bn: BnStats,
    pub iterations_trained: usize,
}

impl GanModel {
    pub fn new(cfg: GanConfig, out_scale: Vec<f64>, seed: u64) -> Result<GanModel> {
        cfg.validate()?;
        if out_scale.len() != cfg.embed_dim {
            return Err(Error::shape(format!(
                "gan: out_scale has {} entries, embed_dim is {}",
                out_scale.len(),
                cfg.embed_dim
            )));
        }
        if out_scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("gan: out_scale entries must be finite and > 0"));
        }
        let trunk = ConvTrunk::new(&cfg.widths, cfg.maps, cfg.embed_dim)?;
        let flat = cfg.t0() * cfg.maps;

        let mut gen = ParamSet::new("gen");
        let mut r = rng::substream(seed, "gan/init-gen");
        // conv kernels are [out, w, in]; deconv kernels are [in, w, out]
        insert_kernel(&mut gen, "enc/conv1", cfg.maps, 3, cfg.embed_dim, cfg.maps, &mut r)?;
        insert_kernel(&mut gen, "enc/conv2", cfg.maps, 3, cfg.maps, cfg.maps, &mut r)?;
        insert_dense(&mut gen, "enc/out", flat, cfg.latent, Init::Xavier, &mut r)?;
        insert_dense(&mut gen, "dec/fc1", cfg.latent, cfg.latent, Init::He, &mut r)?;
        insert_dense(&mut gen, "dec/fc2", cfg.latent, flat, Init::He, &mut r)?;
        insert_kernel(&mut gen, "dec/deconv1", cfg.maps, 3, cfg.maps, cfg.maps, &mut r)?;
        insert_kernel(&mut gen, "dec/deconv2", cfg.maps, 3, cfg.embed_dim, cfg.embed_dim, &mut r)?;
        if cfg.batch_norm {
            for bn in ["dec/bn0", "dec/bn1"] {
                gen.insert(&format!("{bn}/g"), Tensor::filled(&[cfg.maps], 1.0), ParamKind::Bias)?;
                gen.insert(&format!("{bn}/b"), Tensor::zeros(&[cfg.maps]), ParamKind::Bias)?;
            }
        }

        let mut disc = ParamSet::new("disc");
        let mut r = rng::substream(seed, "gan/init-disc");
        trunk.init_params(&mut disc, "", &mut r)?;
        insert_dense(&mut disc, "head", trunk.out_dim(), 1, Init::Xavier, &mut r)?;

        let bn = BnStats::fresh(cfg.maps);
        Ok(GanModel { cfg, gen, disc, out_scale, bn, iterations_trained: 0 })
    }

    fn trunk(&self) -> ConvTrunk {
        ConvTrunk::new(&self.cfg.widths, self.cfg.maps, self.cfg.embed_dim)
            .expect("validated at construction")
    }
}

enum Init {
    He,
    Xavier,
}

fn insert_dense(
    set: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    init: Init,
    r: &mut impl Rng,
) -> Result<()> {
    let std = match init {
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Xavier => (1.0 / fan_in as f64).sqrt(),
    };
    let data: Vec<f64> =
        (0..fan_in * fan_out).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
    set.insert(&format!("{name}/w"), Tensor::from_vec(&[fan_in, fan_out], data)?, ParamKind::Weight)?;
    set.insert(&format!("{name}/b"), Tensor::zeros(&[fan_out]), ParamKind::Bias)
}

/// Conv/deconv kernel `[F, w, C]` with He init over the w*C fan-in and a
/// zero bias sized to the layer's output channels.
fn insert_kernel(
    set: &mut ParamSet,
    name: &str,
    f: usize,
    w: usize,
    c: usize,
    bias_dim: usize,
    r: &mut impl Rng,
) -> Result<()> {
    let std = (2.0 / (w * c) as f64).sqrt();
    let data: Vec<f64> =
        (0..f * w * c).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
    set.insert(&format!("{name}/k"), Tensor::from_vec(&[f, w, c], data)?, ParamKind::Weight)?;
    set.insert(&format!("{name}/b"), Tensor::zeros(&[bias_dim]), ParamKind::Bias)
}

/// Which batch-norm statistics a decode uses.
enum BnMode<'a> {
    /// Batch statistics; returns them so the caller can fold running stats.
    Train,
    Infer(&'a BnStats),
}

/// Batch statistics of one training-mode decode, per deconv layer.
struct BnBatch {
    mean1: Vec<f64>,
    var1: Vec<f64>,
    mean2: Vec<f64>,
    var2: Vec<f64>,
}

/// seq_rows -> seq_rows/3 -> t0 rows, then flatten to a linear latent code.
fn encode_graph(g: &mut Graph, model: &GanModel, x: NodeId) -> Result<NodeId> {
    let cfg = &model.cfg;
    let (k1, b1) = (g.lease(&model.gen, "enc/conv1/k")?, g.lease(&model.gen, "enc/conv1/b")?);
    let c1 = g.conv1d(x, k1, b1, 3)?;
    let a1 = g.relu(c1);
    let (k2, b2) = (g.lease(&model.gen, "enc/conv2/k")?, g.lease(&model.gen, "enc/conv2/b")?);
    let c2 = g.conv1d(a1, k2, b2, 1)?;
    let a2 = g.relu(c2);
    let batch = g.value(a2).shape()[0];
    let flat = g.reshape(a2, &[batch, cfg.t0() * cfg.maps])?;
    let w = g.lease(&model.gen, "enc/out/w")?;
    let b = g.lease(&model.gen, "enc/out/b")?;
    g.dense(flat, w, b) // linear latent code
}

/// Two dense layers, reshape to t0 rows, then upsample t0 -> seq_rows/3 ->
/// seq_rows; the second deconv emits the embedding channels directly.
/// Batch norm sits on the two intermediate channel maps.
fn decode_graph(
    g: &mut Graph,
    model: &GanModel,
    h: NodeId,
    mode: BnMode,
) -> Result<(NodeId, Option<BnBatch>)> {
    let cfg = &model.cfg;
    let (w1, b1) = (g.lease(&model.gen, "dec/fc1/w")?, g.lease(&model.gen, "dec/fc1/b")?);
    let fc1 = g.dense(h, w1, b1)?;
    let a1 = g.relu(fc1);
    let (w2, b2) = (g.lease(&model.gen, "dec/fc2/w")?, g.lease(&model.gen, "dec/fc2/b")?);
    let fc2 = g.dense(a1, w2, b2)?;
    let batch = g.value(fc2).shape()[0];
    let r0 = g.reshape(fc2, &[batch, cfg.t0(), cfg.maps])?;

    let (n0, s0) = if cfg.batch_norm {
        let (g0, be0) = (g.lease(&model.gen, "dec/bn0/g")?, g.lease(&model.gen, "dec/bn0/b")?);
        match &mode {
            BnMode::Train => {
                let (id, mean, var) = g.batch_norm_train(r0, g0, be0, BN_EPS)?;
                (id, Some((mean, var)))
            }
            BnMode::Infer(bn) => {
                (g.batch_norm_infer(r0, g0, be0, &bn.mean1, &bn.var1, BN_EPS)?, None)
            }
        }
    } else {
        (r0, None)
    };
    let a0 = g.relu(n0);

    let (k1, kb1) = (g.lease(&model.gen, "dec/deconv1/k")?, g.lease(&model.gen, "dec/deconv1/b")?);
    let d1 = g.deconv1d(a0, k1, kb1, 1)?;
    let (n1, s1) = if cfg.batch_norm {
        let (g1, be1) = (g.lease(&model.gen, "dec/bn1/g")?, g.lease(&model.gen, "dec/bn1/b")?);
        match &mode {
            BnMode::Train => {
                let (id, mean, var) = g.batch_norm_train(d1, g1, be1, BN_EPS)?;
                (id, Some((mean, var)))
            }
            BnMode::Infer(bn) => {
                (g.batch_norm_infer(d1, g1, be1, &bn.mean2, &bn.var2, BN_EPS)?, None)
            }
        }
    } else {
        (d1, None)
    };
    let a1 = g.relu(n1);

    let (k2, kb2) = (g.lease(&model.gen, "dec/deconv2/k")?, g.lease(&model.gen, "dec/deconv2/b")?);
    let d2 = g.deconv1d(a1, k2, kb2, 3)?;
    let t = g.tanh(d2);
    let out = g.col_scale(t, Tensor::from_vec(&[model.out_scale.len()], model.out_scale.clone())?)?;

    let stats = match (s0, s1) {
        (Some((m1, v1)), Some((m2, v2))) => {
            Some(BnBatch { mean1: m1, var1: v1, mean2: m2, var2: v2 })
        }
        _ => None,
    };
    Ok((out, stats))
}

fn disc_graph(g: &mut Graph, model: &GanModel, x: NodeId) -> Result<NodeId> {
    let feats = model.trunk().graph_forward(g, x, &model.disc, "")?;
    let w = g.lease(&model.disc, "head/w")?;
    let b = g.lease(&model.disc, "head/b")?;
    let logits = g.dense(feats, w, b)?;
    Ok(g.sigmoid(logits))
}

/// In-graph L2 penalty over the discriminator's weight matrices.
fn disc_l2_graph(g: &mut Graph, model: &GanModel) -> Result<Option<NodeId>> {
    if model.cfg.optim.l2 == 0.0 {
        return Ok(None);
    }
    let mut acc: Option<NodeId> = None;
    for entry in model.disc.weight_names() {
        let node = g.lease(&model.disc, &entry)?;
        let ss = g.sq_sum(node);
        acc = Some(match acc {
            Some(a) => g.add(a, ss)?,
            None => ss,
        });
    }
    Ok(acc.map(|a| g.scale(a, model.cfg.optim.l2)))
}

struct GenForward {
    total: NodeId,
    adv: f64,
    recon: f64,
    d_fake_mean: f64,
    bn: Option<BnBatch>,
}

/// Generator objective on one minibatch:
/// rho * BCE(D(x_tilde), 1) + (1 - rho) * mean squared reconstruction error.
fn build_gen_graph(
    g: &mut Graph,
    model: &GanModel,
    x: Tensor,
    mask: Tensor,
    z: Tensor,
) -> Result<GenForward> {
    let (b, t, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xn = g.input(x);
    let h = encode_graph(g, model, xn)?;
    let zn = g.input(z);
    let ht = g.mask_mix(h, zn, mask)?;
    let (xt, bn) = decode_graph(g, model, ht, BnMode::Train)?;
    let d = disc_graph(g, model, xt)?;
    let adv = g.binary_xent(d, &vec![1.0; b])?;
    let (xr, _) = decode_graph(g, model, h, BnMode::Train)?;
    let diff = g.sub(xr, xn)?;
    let ss = g.sq_sum(diff);
    let recon = g.scale(ss, 1.0 / (b * t * m) as f64);
    let wa = g.scale(adv, model.cfg.rho);
    let wr = g.scale(recon, 1.0 - model.cfg.rho);
    let total = g.add(wa, wr)?;
    let d_fake_mean = mean(g.value(d).data());
    Ok(GenForward {
        total,
        adv: g.value(adv).item(),
        recon: g.value(recon).item(),
        d_fake_mean,
        bn,
    })
}

struct DiscForward {
    total: NodeId,
    real_bce: f64,
    fake_bce: f64,
    l2: f64,
    d_real_mean: f64,
    d_fake_mean: f64,
}

/// Discriminator objective: BCE(D(real), smooth) + BCE(D(fake), 0) + L2.
fn build_disc_graph(
    g: &mut Graph,
    model: &GanModel,
    x_real: Tensor,
    x_fake: Tensor,
) -> Result<DiscForward> {
    let b = x_real.shape()[0];
    let bf = x_fake.shape()[0];
    let xr = g.input(x_real);
    let xf = g.input(x_fake);
    let dr = disc_graph(g, model, xr)?;
    let df = disc_graph(g, model, xf)?;
    let real_bce = g.binary_xent(dr, &vec![model.cfg.smooth; b])?;
    let fake_bce = g.binary_xent(df, &vec![0.0; bf])?;
    let mut total = g.add(real_bce, fake_bce)?;
    let mut l2_val = 0.0;
    if let Some(l2) = disc_l2_graph(g, model)? {
        l2_val = g.value(l2).item();
        total = g.add(total, l2)?;
    }
    Ok(DiscForward {
        total,
        real_bce: g.value(real_bce).item(),
        fake_bce: g.value(fake_bce).item(),
        l2: l2_val,
        d_real_mean: mean(g.value(dr).data()),
        d_fake_mean: mean(g.value(df).data()),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Loss values and parameter gradients of the generator objective, without
/// stepping; the gradient map covers both networks (the caller filters).
pub fn generator_loss_grads(
    model: &GanModel,
    x: Tensor,
    mask: Tensor,
    z: Tensor,
) -> Result<(f64, f64, f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let fwd = build_gen_graph(&mut g, model, x, mask, z)?;
    let total = g.value(fwd.total).item();
    g.backward(fwd.total)?;
    Ok((total, fwd.adv, fwd.recon, g.param_grads()))
}

/// (total, real term, fake term, l2 term, gradients by parameter name).
type DiscGrads = Result<(f64, f64, f64, f64, BTreeMap<String, Tensor>)>;

/// Same for the discriminator objective.
pub fn discriminator_loss_grads(
    model: &GanModel,
    x_real: Tensor,
    x_fake: Tensor,
) -> DiscGrads {
    let mut g = Graph::new();
    let fwd = build_disc_graph(&mut g, model, x_real, x_fake)?;
    let total = g.value(fwd.total).item();
    g.backward(fwd.total)?;
    Ok((total, fwd.real_bce, fwd.fake_bce, fwd.l2, g.param_grads()))
}

fn fold_bn(model: &mut GanModel, batch: &BnBatch) {
    let fold = |run: &mut [f64], b: &[f64]| {
        for (r, v) in run.iter_mut().zip(b) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * *v;
        }
    };
    fold(&mut model.bn.mean1, &batch.mean1);
    fold(&mut model.bn.var1, &batch.var1);
    fold(&mut model.bn.mean2, &batch.mean2);
    fold(&mut model.bn.var2, &batch.var2);
}

/// One generator update; folds the transition path's batch statistics into
/// the model's running estimates. Returns (total, adv, recon, mean D(fake)).
fn gen_step(model: &mut GanModel, x: Tensor, mask: Tensor, z: Tensor) -> Result<(f64, f64, f64, f64)> {
    let (vals, stats, grads) = {
        let mut g = Graph::new();
        let fwd = build_gen_graph(&mut g, model, x, mask, z)?;
        let total = g.value(fwd.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "gan: generator loss {total} (adv {}, recon {})",
                fwd.adv, fwd.recon
            )));
        }
        g.backward(fwd.total)?;
        ((total, fwd.adv, fwd.recon, fwd.d_fake_mean), fwd.bn, g.param_grads())
    };
    model.gen.accumulate(&grads)?;
    model.gen.clip_and_step(&model.cfg.optim)?;
    if let Some(bn) = stats {
        fold_bn(model, &bn);
    }
    Ok(vals)
}

/// One discriminator update on a real batch and detached fakes.
fn disc_step(
    model: &mut GanModel,
    x_real: Tensor,
    x_fake: Tensor,
) -> Result<(f64, f64, f64)> {
    let (vals, grads) = {
        let mut g = Graph::new();
        let fwd = build_disc_graph(&mut g, model, x_real, x_fake)?;
        let total = g.value(fwd.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "gan: discriminator loss {total} (real {}, fake {}, l2 {})",
                fwd.real_bce, fwd.fake_bce, fwd.l2
            )));
        }
        g.backward(fwd.total)?;
        ((total, fwd.d_real_mean, fwd.d_fake_mean), g.param_grads())
    };
    model.disc.accumulate(&grads)?;
    model.disc.clip_and_step(&model.cfg.optim)?;
    Ok(vals)
}

/// Transitions of a batch without touching gradients or running statistics;
/// training-mode batch norm, matching what the discriminator sees in
/// adversarial steps.
fn detached_transitions(model: &GanModel, x: Tensor, mask: Tensor, z: Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.input(x);
    let h = encode_graph(&mut g, model, xn)?;
    let zn = g.input(z);
    let ht = g.mask_mix(h, zn, mask)?;
    let (xt, _) = decode_graph(&mut g, model, ht, BnMode::Train)?;
    Ok(g.value(xt).clone())
}

pub fn draw_mask(b: usize, latent: usize, p: f64, r: &mut impl Rng) -> Tensor {
    let data: Vec<f64> =
        (0..b * latent).map(|_| if r.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[b, latent], data).expect("mask shape")
}

pub fn draw_latent(b: usize, latent: usize, r: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..b * latent).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(&[b, latent], data).expect("latent shape")
}

#[derive(Debug, Clone)]
pub struct GanIterRecord {
    pub iter: usize,
    pub loss_g: f64,
    pub adv: f64,
    pub recon: f64,
    pub loss_d: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GanHistory {
    pub records: Vec<GanIterRecord>,
    pub converged_at: Option<usize>,
}

impl GanHistory {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("iter\tloss_g\tadv\trecon\tloss_d\td_real\td_fake\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.iter, r.loss_g, r.adv, r.recon, r.loss_d, r.d_real, r.d_fake
            );
        }
        s
    }
}

/// Embed a uniformly drawn (with replacement) minibatch at the GAN's fixed
/// row count.
fn draw_batch(
    records: &[&PatientRecord],
    table: &EmbeddingTable,
    rows: usize,
    batch: usize,
    r: &mut impl Rng,
) -> Result<Tensor> {
    let picks: Vec<&PatientRecord> =
        (0..batch).map(|_| records[r.random_range(0..records.len())]).collect();
    let (x, _) = embed_batch(&picks, table, rows)?;
    Ok(x)
}

/// Adversarial training: `inner_steps` generator updates, then one
/// discriminator update on a fresh batch and its detached transitions.
/// Stops early once the discriminator stays near 1/2 on both streams.
/// Parameters stay at their last finite values if a loss diverges.
pub fn train_gan(
    records: &[&PatientRecord],
    table: &EmbeddingTable,
    cfg: &GanConfig,
    seed: u64,
) -> Result<(GanModel, GanHistory)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("gan: no training records"));
    }
    if table.dim() != cfg.embed_dim {
        return Err(Error::Mismatch(format!(
            "gan: embedding dim {} vs configured {}",
            table.dim(),
            cfg.embed_dim
        )));
    }
    let out_scale: Vec<f64> =
        table.per_dim_max_abs().into_iter().map(|v| if v > 0.0 { v } else { 1.0 }).collect();
    let mut model = GanModel::new(cfg.clone(), out_scale, seed)?;

    let mut bat_rng = rng::substream(seed, "gan/batches");
    let mut mask_rng = rng::substream(seed, "gan/masks");
    let mut lat_rng = rng::substream(seed, "gan/latents");

    let mut history = GanHistory::default();
    let mut streak = 0usize;
    for iter in 0..cfg.max_iterations {
        let mut last_gen = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..cfg.inner_steps {
            let x = draw_batch(records, table, cfg.seq_rows, cfg.batch, &mut bat_rng)?;
            let m = draw_mask(cfg.batch, cfg.latent, cfg.mask_p, &mut mask_rng);
            let z = draw_latent(cfg.batch, cfg.latent, &mut lat_rng);
            last_gen = gen_step(&mut model, x, m, z)?;
        }
        let x_real = draw_batch(records, table, cfg.seq_rows, cfg.batch, &mut bat_rng)?;
        let m = draw_mask(cfg.batch, cfg.latent, cfg.mask_p, &mut mask_rng);
        let z = draw_latent(cfg.batch, cfg.latent, &mut lat_rng);
        let x_fake = detached_transitions(&model, x_real.clone(), m, z)?;
        let (loss_d, d_real, d_fake) = disc_step(&mut model, x_real, x_fake)?;

        model.iterations_trained = iter + 1;
        history.records.push(GanIterRecord {
            iter,
            loss_g: last_gen.0,
            adv: last_gen.1,
            recon: last_gen.2,
            loss_d,
            d_real,
            d_fake,
        });
        if (d_real - 0.5).abs() < cfg.converge_tol && (d_fake - 0.5).abs() < cfg.converge_tol {
            streak += 1;
            if streak >= cfg.converge_window {
                history.converged_at = Some(iter);
                break;
            }
        } else {
            streak = 0;
        }
    }
    Ok((model, history))
}

/// x_tilde for an explicit mask and noise draw, inference batch norm.
pub fn transition(model: &GanModel, x: &Tensor, mask: &Tensor, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let h = encode_graph(&mut g, model, xn)?;
    let zn = g.input(z.clone());
    let ht = g.mask_mix(h, zn, mask.clone())?;
    let (xt, _) = decode_graph(&mut g, model, ht, BnMode::Infer(&model.bn))?;
    Ok(g.value(xt).clone())
}

/// Autoencoding path dec(enc(x)); equals `transition` under an all-zero mask.
pub fn reconstruct(model: &GanModel, x: &Tensor) -> Result<Tensor> {
    let zero = Tensor::zeros(&[x.shape()[0], model.cfg.latent]);
    transition(model, x, &zero, &zero)
}

/// Fresh mask and noise per example, inference batch norm.
pub fn sample_transitions(model: &GanModel, x: &Tensor, r: &mut impl Rng) -> Result<Tensor> {
    let b = x.shape()[0];
    let m = draw_mask(b, model.cfg.latent, model.cfg.mask_p, r);
    let z = draw_latent(b, model.cfg.latent, r);
    transition(model, x, &m, &z)
}

#[derive(Debug, Clone, Default)]
pub struct GenCorpusStats {
    pub generated: usize,
    /// Sequences whose decode produced no code before the END mark.
    pub skipped_empty: usize,
    /// Sequences with no END mark in any row (kept, truncated at seq_rows).
    pub missing_end: usize,
    pub mean_len: f64,
}

/// Decode transitions of real source records into a synthetic labeled
/// corpus. Windows are synthetic timing: events are spread evenly over
/// ceil(len/20) windows (capped at 12) since the generator emits no timing.
pub fn generate_corpus(
    model: &GanModel,
    table: &EmbeddingTable,
    source: &[&PatientRecord],
    count: usize,
    label: Label,
    id_base: u64,
    seed: u64,
) -> Result<(Vec<PatientRecord>, GenCorpusStats)> {
    if source.is_empty() {
        return Err(Error::invalid("generate_corpus: no source records"));
    }
    if table.dim() != model.cfg.embed_dim {
        return Err(Error::Mismatch(format!(
            "generate_corpus: embedding dim {} vs model {}",
            table.dim(),
            model.cfg.embed_dim
        )));
    }
    let mut r = rng::substream(seed, "gan/corpus");
    let decoder = Decoder::new(table);
    let mut out = Vec::with_capacity(count);
    let mut stats = GenCorpusStats::default();
    let mut len_sum = 0usize;
    let rows = model.cfg.seq_rows;
    let dim = table.dim();
    while out.len() < count {
        if stats.generated > 50 * count.max(1) + 50 {
            return Err(Error::invalid(format!(
                "generate_corpus: {} of {} decodes were empty; the model is not \
                 producing usable sequences",
                stats.skipped_empty, stats.generated
            )));
        }
        let batch = model.cfg.batch.min(count - out.len()).max(1);
        let x = draw_batch(source, table, rows, batch, &mut r)?;
        let xt = sample_transitions(model, &x, &mut r)?;
        for bi in 0..batch {
            stats.generated += 1;
            let mat = Tensor::from_vec(
                &[rows, dim],
                xt.data()[bi * rows * dim..(bi + 1) * rows * dim].to_vec(),
            )?;
            let decoded = decoder.decode_rows(&mat)?;
            let mut codes = Vec::new();
            let mut saw_end = false;
            for (d, _) in &decoded {
                match d {
                    Decoded::Code(c) => codes.push(*c),
                    Decoded::End => {
                        saw_end = true;
                        break;
                    }
                    Decoded::Pad => {} // zero rows cannot terminate generation
                }
            }
            if !saw_end {
                stats.missing_end += 1;
            }
            if codes.is_empty() {
                stats.skipped_empty += 1;
                continue;
            }
            let len = codes.len();
            len_sum += len;
            let windows = (len.div_ceil(20)).clamp(1, 12);
            let events = codes
                .into_iter()
                .enumerate()
                .map(|(i, code)| Event { window: (i * windows / len) as u16, code })
                .collect();
            out.push(PatientRecord { id: id_base + out.len() as u64, label, events });
            if out.len() == count {
                break;
            }
        }
    }
    stats.mean_len = if out.is_empty() { 0.0 } else { len_sum as f64 / out.len() as f64 };
    Ok((out, stats))
}

/// Label-conditional transition source for semi-supervised training: each
/// class's records pass through the GAN trained on that class, inheriting
/// their labels. With `resample` off, the first draw per record is cached
/// and reused every epoch.
pub struct TransitionAugment<'a> {
    models: BTreeMap<usize, GanModel>,
    table: &'a EmbeddingTable,
    rng: rand_chacha::ChaCha12Rng,
    resample: bool,
    cache: BTreeMap<u64, Tensor>,
}

impl<'a> TransitionAugment<'a> {
    pub fn new(
        models: Vec<(usize, GanModel)>,
        table: &'a EmbeddingTable,
        seed: u64,
        resample: bool,
    ) -> Result<TransitionAugment<'a>> {
        let mut map = BTreeMap::new();
        for (class, model) in models {
            if model.cfg.embed_dim != table.dim() {
                return Err(Error::Mismatch(format!(
                    "transition augment: class {class} model dim {} vs table {}",
                    model.cfg.embed_dim,
                    table.dim()
                )));
            }
            if map.insert(class, model).is_some() {
                return Err(Error::invalid(format!("transition augment: class {class} twice")));
            }
        }
        if map.is_empty() {
            return Err(Error::invalid("transition augment: no models"));
        }
        Ok(TransitionAugment {
            models: map,
            table,
            rng: rng::substream(seed, "gan/transitions"),
            resample,
            cache: BTreeMap::new(),
        })
    }

    fn rows(&self) -> usize {
        self.models.values().next().expect("non-empty").cfg.seq_rows
    }
}

impl Augment for TransitionAugment<'_> {
    fn augment(
        &mut self,
        recs: &[&PatientRecord],
        labels: &[usize],
    ) -> Result<(Tensor, Vec<usize>)> {
        if recs.len() != labels.len() {
            return Err(Error::invalid("transition augment: recs/labels length mismatch"));
        }
        for (i, &l) in labels.iter().enumerate() {
            if !self.models.contains_key(&l) {
                return Err(Error::invalid(format!(
                    "transition augment: no model for class {l} (record {})",
                    recs[i].id
                )));
            }
        }
        let rows = self.rows();
        let dim = self.table.dim();
        let mut out = vec![0.0; recs.len() * rows * dim];
        // classes in ascending order so the noise stream is batch-order
        // independent of label interleaving
        let classes: Vec<usize> = self.models.keys().cloned().collect();
        for class in classes {
            let pos: Vec<usize> = (0..recs.len()).filter(|&i| labels[i] == class).collect();
            if pos.is_empty() {
                continue;
            }
            let model = &self.models[&class];
            if self.resample {
                let group: Vec<&PatientRecord> = pos.iter().map(|&i| recs[i]).collect();
                let (x, _) = embed_batch(&group, self.table, rows)?;
                let xt = sample_transitions(model, &x, &mut self.rng)?;
                for (gi, &i) in pos.iter().enumerate() {
                    out[i * rows * dim..(i + 1) * rows * dim]
                        .copy_from_slice(&xt.data()[gi * rows * dim..(gi + 1) * rows * dim]);
                }
            } else {
                for &i in &pos {
                    let id = recs[i].id;
                    if !self.cache.contains_key(&id) {
                        let (x, _) = embed_batch(&[recs[i]], self.table, rows)?;
                        let xt = sample_transitions(model, &x, &mut self.rng)?;
                        self.cache.insert(id, xt);
                    }
                    out[i * rows * dim..(i + 1) * rows * dim]
                        .copy_from_slice(self.cache[&id].data());
                }
            }
        }
        Ok((Tensor::from_vec(&[recs.len(), rows, dim], out)?, labels.to_vec()))
    }
}

/// Full checkpoint: both parameter sets, output scale, running batch-norm
/// statistics, and enough metadata to rebuild the exact configuration.
pub fn save_gan(path: &Path, model: &GanModel, seed: u64) -> Result<()> {
    save_gan_with(path, model, seed, &[])
}

/// `save_gan` plus extra metadata lines (pipeline provenance links).
pub fn save_gan_with(
    path: &Path,
    model: &GanModel,
    seed: u64,
    extra: &[(&str, String)],
) -> Result<()> {
    let cfg = &model.cfg;
    let widths: Vec<String> = cfg.widths.iter().map(|w| w.to_string()).collect();
    let mut meta = format!(
        "kind=gan\nrho={}\ninner_steps={}\nlatent={}\nmask_p={}\nseq_rows={}\nembed_dim={}\n\
         widths={}\nmaps={}\nsmooth={}\nbatch_norm={}\nbatch={}\nmax_iterations={}\n\
         converge_window={}\nconverge_tol={}\nlr={}\nclip={}\nl2={}\niterations={}\nseed={}\n",
        cfg.rho,
        cfg.inner_steps,
        cfg.latent,
        cfg.mask_p,
        cfg.seq_rows,
        cfg.embed_dim,
        widths.join(","),
        cfg.maps,
        cfg.smooth,
        cfg.batch_norm,
        cfg.batch,
        cfg.max_iterations,
        cfg.converge_window,
        cfg.converge_tol,
        cfg.optim.lr,
        cfg.optim.clip,
        cfg.optim.l2,
        model.iterations_trained,
        seed,
    );
    for (k, v) in extra {
        meta.push_str(&format!("{k}={v}\n"));
    }
    let mut tensors = BTreeMap::new();
    for (k, v) in model.gen.values_map() {
        tensors.insert(format!("gen/{k}"), v);
    }
    for (k, v) in model.disc.values_map() {
        tensors.insert(format!("disc/{k}"), v);
    }
    tensors.insert(
        "aux/out_scale".into(),
        Tensor::from_vec(&[model.out_scale.len()], model.out_scale.clone())?,
    );
    for (name, data) in [
        ("aux/bn_mean1", &model.bn.mean1),
        ("aux/bn_var1", &model.bn.var1),
        ("aux/bn_mean2", &model.bn.mean2),
        ("aux/bn_var2", &model.bn.var2),
    ] {
        tensors.insert(name.into(), Tensor::from_vec(&[data.len()], data.clone())?);
    }
    checkpoint::save(path, &meta, &tensors)
}

pub fn load_gan(path: &Path) -> Result<GanModel> {
    let (meta, tensors) = checkpoint::load(path)?;
    let kv = checkpoint::meta_map(&meta);
    let missing = |k: &str| Error::Format {
        path: path.display().to_string(),
        msg: format!("gan checkpoint lacks meta `{k}`"),
    };
    let get = |k: &str| kv.get(k).cloned().ok_or_else(|| missing(k));
    if get("kind")? != "gan" {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: "not a gan checkpoint".into(),
        });
    }
    macro_rules! parse {
        ($k:expr) => {
            get($k)?.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                msg: format!("bad meta `{}`", $k),
            })?
        };
    }
    let widths: Vec<usize> = get("widths")?
        .split(',')
        .map(|t| {
            t.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                msg: format!("bad widths entry `{t}`"),
            })
        })
        .collect::<Result<_>>()?;
    let cfg = GanConfig {
        rho: parse!("rho"),
        inner_steps: parse!("inner_steps"),
        latent: parse!("latent"),
        mask_p: parse!("mask_p"),
        seq_rows: parse!("seq_rows"),
        embed_dim: parse!("embed_dim"),
        widths,
        maps: parse!("maps"),
        smooth: parse!("smooth"),
        batch_norm: parse!("batch_norm"),
        batch: parse!("batch"),
        max_iterations: parse!("max_iterations"),
        converge_window: parse!("converge_window"),
        converge_tol: parse!("converge_tol"),
        optim: OptimConfig {
            lr: parse!("lr"),
            clip: parse!("clip"),
            l2: parse!("l2"),
            ..OptimConfig::default()
        },
    };
    let iterations: usize = parse!("iterations");
    let aux = |k: &str| {
        tensors.get(k).map(|t| t.data().to_vec()).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            msg: format!("gan checkpoint lacks tensor `{k}`"),
        })
    };
    let out_scale = aux("aux/out_scale")?;
    let mut model = GanModel::new(cfg, out_scale, 0)?;
    let mut gen_vals = BTreeMap::new();
    let mut disc_vals = BTreeMap::new();
    for (k, v) in &tensors {
        if let Some(e) = k.strip_prefix("gen/") {
            gen_vals.insert(e.to_string(), v.clone());
        } else if let Some(e) = k.strip_prefix("disc/") {
            disc_vals.insert(e.to_string(), v.clone());
        }
    }
    model.gen.set_values(&gen_vals)?;
    model.disc.set_values(&disc_vals)?;
    model.bn = BnStats {
        mean1: aux("aux/bn_mean1")?,
        var1: aux("aux/bn_var1")?,
        mean2: aux("aux/bn_mean2")?,
        var2: aux("aux/bn_var2")?,
    };
    model.iterations_trained = iterations;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{train_embedding, EmbedConfig};
    use crate::synth::{Cohort, Split, Vocabulary};
    use crate::tensor::check;

    const DIM: usize = 6;

    fn tiny_cfg() -> GanConfig {
        GanConfig {
            latent: 5,
            seq_rows: 12,
            embed_dim: DIM,
            widths: vec![2, 3],
            maps: 4,
            batch: 4,
            max_iterations: 3,
            optim: OptimConfig { lr: 0.01, l2: 1e-4, ..OptimConfig::default() },
            ..GanConfig::default()
        }
    }

    fn toy_records(n: usize) -> Vec<PatientRecord> {
        (0..n)
            .map(|i| PatientRecord {
                id: i as u64,
                label: Label::Case,
                events: (0..6 + i % 4)
                    .map(|j| Event { window: (j / 3) as u16, code: ((i + j) % 5) as u32 })
                    .collect(),
            })
            .collect()
    }

    fn toy_table(records: &[PatientRecord]) -> EmbeddingTable {
        let cohort = Cohort {
            records: records.to_vec(),
            splits: vec![Split::Train; records.len()],
            vocab: Vocabulary::new(5),
            spec_hash: "toy".into(),
            seed: 1,
        };
        let cfg = EmbedConfig { dim: DIM, window: 3, negatives: 2, epochs: 2, lr: 0.05 };
        train_embedding(&cohort, &cfg, 4).unwrap().0
    }

    fn toy_model(seed: u64) -> GanModel {
        GanModel::new(tiny_cfg(), vec![0.4; DIM], seed).unwrap()
    }

    fn toy_x(b: usize) -> Tensor {
        let data: Vec<f64> =
            (0..b * 12 * DIM).map(|i| (((i * 29) % 17) as f64 - 8.0) / 25.0).collect();
        Tensor::from_vec(&[b, 12, DIM], data).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        assert!(tiny_cfg().validate().is_ok());
        assert!(GanConfig { seq_rows: 13, ..tiny_cfg() }.validate().is_err());
        assert!(GanConfig { seq_rows: 6, ..tiny_cfg() }.validate().is_err());
        assert!(GanConfig { rho: 1.5, ..tiny_cfg() }.validate().is_err());
        assert!(GanConfig { mask_p: -0.1, ..tiny_cfg() }.validate().is_err());
        assert!(GanConfig { smooth: 0.0, ..tiny_cfg() }.validate().is_err());
        assert!(GanModel::new(tiny_cfg(), vec![0.4; DIM - 1], 3).is_err());
        assert!(GanModel::new(tiny_cfg(), vec![0.0; DIM], 3).is_err());
    }

    #[test]
    fn decoder_emits_bounded_rows_of_the_right_shape() {
        let model = toy_model(7);
        let x = toy_x(3);
        let m = draw_mask(3, 5, 0.5, &mut rng::substream(1, "t"));
        let z = draw_latent(3, 5, &mut rng::substream(2, "t"));
        let xt = transition(&model, &x, &m, &z).unwrap();
        assert_eq!(xt.shape(), &[3, 12, DIM]);
        for row in xt.data().chunks(DIM) {
            for (c, v) in row.iter().enumerate() {
                assert!(v.abs() <= model.out_scale[c] + 1e-12);
            }
        }
    }

    #[test]
    fn zero_mask_transition_equals_reconstruction_bitwise() {
        let model = toy_model(11);
        let x = toy_x(4);
        let zero = Tensor::zeros(&[4, 5]);
        let z = draw_latent(4, 5, &mut rng::substream(9, "t"));
        // noise is present but fully masked out
        let xt = transition(&model, &x, &zero, &z).unwrap();
        let xr = reconstruct(&model, &x).unwrap();
        assert_eq!(xt.data(), xr.data());
    }

    #[test]
    fn full_mask_transition_ignores_the_input() {
        let model = toy_model(13);
        let ones = Tensor::filled(&[2, 5], 1.0);
        let z = draw_latent(2, 5, &mut rng::substream(21, "t"));
        let a = transition(&model, &toy_x(2), &ones, &z).unwrap();
        let other = Tensor::filled(&[2, 12, DIM], 0.3);
        let b = transition(&model, &other, &ones, &z).unwrap();
        assert_eq!(a.data(), b.data());
    }

    fn gen_fd_case(cfg: GanConfig, seed: u64) -> check::GradReport {
        let model = GanModel::new(cfg, vec![0.4; DIM], seed).unwrap();
        let x = toy_x(4);
        let m = draw_mask(4, 5, 0.5, &mut rng::substream(31, "t"));
        let z = draw_latent(4, 5, &mut rng::substream(32, "t"));
        let (total, adv, recon, grads) =
            generator_loss_grads(&model, x.clone(), m.clone(), z.clone()).unwrap();
        assert!((total - (model.cfg.rho * adv + (1.0 - model.cfg.rho) * recon)).abs() < 1e-10);

        let mut params = model.gen.clone();
        let numeric = check::central_diff_params(&mut params, check::FD_STEP, |p| {
            let probe = GanModel {
                cfg: model.cfg.clone(),
                gen: p.clone(),
                disc: model.disc.clone(),
                out_scale: model.out_scale.clone(),
                bn: model.bn.clone(),
                iterations_trained: 0,
            };
            generator_loss_grads(&probe, x.clone(), m.clone(), z.clone()).map(|(t, _, _, _)| t)
        })
        .unwrap();
        check::compare_grads(&grads, &numeric, "gen")
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        // seeds chosen away from relu-kink straddles; without batch norm raw
        // preactivations sit near zero more often (see the ignored seed scan)
        let report = gen_fd_case(tiny_cfg(), 20);
        assert!(report.max_rel <= check::FD_REL_TOL, "generator FD mismatch: {report:?}");
    }

    /// Seed picker for the FD tests: `cargo test -p ehrgan seed_scan -- --ignored
    /// --nocapture` and choose a seed with small max_rel on both rows.
    pub fn scan_fd_impl() {
        for seed in 18..40u64 {
            for (name, cfg) in
                [("off", tiny_cfg()), ("on", GanConfig { batch_norm: true, ..tiny_cfg() })]
            {
                let g = gen_fd_case(cfg.clone(), seed);
                let d = disc_fd_case(cfg, seed);
                println!("seed {seed} bn {name}: gen {:.3e} disc {:.3e}", g.max_rel, d.max_rel);
            }
        }
    }

    #[test]
    fn generator_gradients_match_finite_differences_with_batch_norm() {
        let report = gen_fd_case(GanConfig { batch_norm: true, ..tiny_cfg() }, 18);
        assert!(report.max_rel <= check::FD_REL_TOL, "generator FD mismatch: {report:?}");
    }

    fn disc_fd_case(cfg: GanConfig, seed: u64) -> check::GradReport {
        let model = GanModel::new(cfg, vec![0.4; DIM], seed).unwrap();
        let x_real = toy_x(4);
        let m = draw_mask(4, 5, 0.5, &mut rng::substream(41, "t"));
        let z = draw_latent(4, 5, &mut rng::substream(42, "t"));
        let x_fake = detached_transitions(&model, x_real.clone(), m, z).unwrap();
        let (total, real, fake, l2, grads) =
            discriminator_loss_grads(&model, x_real.clone(), x_fake.clone()).unwrap();
        assert!(l2 > 0.0);
        assert!((total - (real + fake + l2)).abs() < 1e-10);

        let mut params = model.disc.clone();
        let numeric = check::central_diff_params(&mut params, check::FD_STEP, |p| {
            let probe = GanModel {
                cfg: model.cfg.clone(),
                gen: model.gen.clone(),
                disc: p.clone(),
                out_scale: model.out_scale.clone(),
                bn: model.bn.clone(),
                iterations_trained: 0,
            };
            discriminator_loss_grads(&probe, x_real.clone(), x_fake.clone())
                .map(|(t, _, _, _, _)| t)
        })
        .unwrap();
        check::compare_grads(&grads, &numeric, "disc")
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let report = disc_fd_case(tiny_cfg(), 20);
        assert!(report.max_rel <= check::FD_REL_TOL, "discriminator FD mismatch: {report:?}");
    }

    #[test]
    fn discriminator_gradients_match_finite_differences_with_batch_norm() {
        let report = disc_fd_case(GanConfig { batch_norm: true, ..tiny_cfg() }, 19);
        assert!(report.max_rel <= check::FD_REL_TOL, "discriminator FD mismatch: {report:?}");
    }

    #[test]
    fn steps_touch_only_their_own_network() {
        let mut model = toy_model(23);
        let before_disc = model.disc.values_map();
        let x = toy_x(4);
        let m = draw_mask(4, 5, 0.5, &mut rng::substream(51, "t"));
        let z = draw_latent(4, 5, &mut rng::substream(52, "t"));
        gen_step(&mut model, x.clone(), m.clone(), z.clone()).unwrap();
        assert_eq!(model.disc.values_map(), before_disc, "gen step moved disc params");

        let before_gen = model.gen.values_map();
        let fake = detached_transitions(&model, x.clone(), m, z).unwrap();
        disc_step(&mut model, x, fake).unwrap();
        assert_eq!(model.gen.values_map(), before_gen, "disc step moved gen params");
    }

    #[test]
    fn training_is_reproducible_and_tracks_history() {
        let records = toy_records(10);
        let table = toy_table(&records);
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let cfg = tiny_cfg();
        let (m1, h1) = train_gan(&refs, &table, &cfg, 77).unwrap();
        let (m2, h2) = train_gan(&refs, &table, &cfg, 77).unwrap();
        assert_eq!(h1.records.len(), 3);
        assert_eq!(m1.iterations_trained, 3);
        assert_eq!(m1.gen.values_map(), m2.gen.values_map());
        assert_eq!(m1.disc.values_map(), m2.disc.values_map());
        assert_eq!(m1.bn, m2.bn);
        assert!(h1.records.iter().all(|r| r.loss_g.is_finite() && r.loss_d.is_finite()));
        assert_eq!(h1.to_tsv(), h2.to_tsv());

        let (m3, _) = train_gan(&refs, &table, &cfg, 78).unwrap();
        assert_ne!(m1.gen.values_map(), m3.gen.values_map(), "seed should matter");

        // batch_norm off: running stats must stay at their init
        assert!(m1.bn.mean1.iter().all(|v| *v == 0.0));
        assert!(m1.bn.var1.iter().all(|v| *v == 1.0));

        let (m0, h0) =
            train_gan(&refs, &table, &GanConfig { max_iterations: 0, ..cfg }, 77).unwrap();
        assert!(h0.records.is_empty());
        assert_eq!(m0.iterations_trained, 0);
    }

    #[test]
    fn batch_norm_training_updates_running_stats() {
        let records = toy_records(10);
        let table = toy_table(&records);
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let cfg = GanConfig { batch_norm: true, ..tiny_cfg() };
        let (model, _) = train_gan(&refs, &table, &cfg, 77).unwrap();
        assert!(model.bn.mean1.iter().any(|v| *v != 0.0));
        assert!(model.bn.var1.iter().any(|v| *v != 1.0));
    }

    #[test]
    fn corpus_generation_yields_valid_records() {
        let records = toy_records(10);
        let table = toy_table(&records);
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let (model, _) =
            train_gan(&refs, &table, &GanConfig { max_iterations: 2, ..tiny_cfg() }, 5).unwrap();
        let (gen, stats) =
            generate_corpus(&model, &table, &refs, 7, Label::Control, 1000, 3).unwrap();
        assert_eq!(gen.len(), 7);
        assert_eq!(stats.generated, stats.skipped_empty + 7);
        for (i, rec) in gen.iter().enumerate() {
            assert_eq!(rec.id, 1000 + i as u64);
            assert_eq!(rec.label, Label::Control);
            assert!(!rec.events.is_empty());
            assert!(rec.events.len() <= model.cfg.seq_rows);
            let mut last = 0u16;
            for e in &rec.events {
                assert!(e.code < 5, "code {} outside vocab", e.code);
                assert!(e.window >= last);
                last = e.window;
            }
        }
        let (gen2, _) = generate_corpus(&model, &table, &refs, 7, Label::Control, 1000, 3).unwrap();
        assert_eq!(gen, gen2);
    }

    #[test]
    fn transition_augment_groups_by_class_and_caches_when_fixed() {
        let mut records = toy_records(8);
        for (i, r) in records.iter_mut().enumerate() {
            r.label = if i % 2 == 0 { Label::Case } else { Label::Control };
        }
        let table = toy_table(&records);
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let cfg = GanConfig { max_iterations: 1, ..tiny_cfg() };
        let (m_case, _) = train_gan(&refs, &table, &cfg, 61).unwrap();
        let (m_ctrl, _) = train_gan(&refs, &table, &cfg, 62).unwrap();

        let labels: Vec<usize> = records.iter().map(|r| r.label.class_index()).collect();
        let mut aug =
            TransitionAugment::new(vec![(1, m_case), (0, m_ctrl)], &table, 7, true).unwrap();
        let (x, alab) = aug.augment(&refs, &labels).unwrap();
        assert_eq!(x.shape(), &[8, 12, DIM]);
        assert_eq!(alab, labels, "transitions inherit source labels");
        assert!(x.all_finite());

        // fixed-once: identical across epochs
        let (m_case2, _) = train_gan(&refs, &table, &cfg, 61).unwrap();
        let (m_ctrl2, _) = train_gan(&refs, &table, &cfg, 62).unwrap();
        let mut fixed =
            TransitionAugment::new(vec![(1, m_case2), (0, m_ctrl2)], &table, 7, false).unwrap();
        let (a, _) = fixed.augment(&refs, &labels).unwrap();
        let (b, _) = fixed.augment(&refs, &labels).unwrap();
        assert_eq!(a.data(), b.data());

        // unknown class rejected
        let bad = vec![2usize; refs.len()];
        assert!(fixed.augment(&refs, &bad).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let records = toy_records(10);
        let table = toy_table(&records);
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let (model, _) =
            train_gan(&refs, &table, &GanConfig { max_iterations: 2, ..tiny_cfg() }, 91).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gan.ntck");
        save_gan(&path, &model, 91).unwrap();
        let back = load_gan(&path).unwrap();
        assert_eq!(back.gen.values_map(), model.gen.values_map());
        assert_eq!(back.disc.values_map(), model.disc.values_map());
        assert_eq!(back.out_scale, model.out_scale);
        assert_eq!(back.bn, model.bn);
        assert_eq!(back.iterations_trained, 2);
        assert_eq!(back.cfg.rho, model.cfg.rho);

        // sampling through the reloaded model is bitwise identical
        let x = toy_x(2);
        let m = draw_mask(2, 5, 0.5, &mut rng::substream(1, "s"));
        let z = draw_latent(2, 5, &mut rng::substream(2, "s"));
        assert_eq!(
            transition(&model, &x, &m, &z).unwrap().data(),
            transition(&back, &x, &m, &z).unwrap().data()
        );
    }
}

#[cfg(test)]
mod seed_scan {
    #[test]
    #[ignore]
    fn scan() {
        super::tests::scan_fd_impl();
    }
}
