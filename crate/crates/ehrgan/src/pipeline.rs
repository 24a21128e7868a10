//! Pipeline stages behind the CLI subcommands.
//!
//! Each stage is a function of (resolved config, run directory): it loads
//! upstream artifacts by conventional name (overridable via `paths.*` keys),
//! writes its own artifact plus a small text report, and records provenance
//! in the artifact metadata — the SHA-256 of every upstream file it consumed
//! and the code version. `evaluate` re-hashes the files on disk and refuses
//! a pipeline whose recorded chain doesn't match.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::embedding::{self, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{self, FidelityReport, GroupSummary, RunSummary};
use crate::gan::{self, GanModel, TransitionAugment};
use crate::predictor::{
    self, Augment, PredictorModel, RandAugment, TrainData, TrainHistory, TrainMode,
};
use crate::rng;
use crate::synth::{self, Cohort, Label, PatientRecord, Split};
use crate::tensor::checkpoint;

pub const CORPUS_FILE: &str = "corpus.ehr";
pub const EMBEDDING_FILE: &str = "embedding.ntck";
pub const GAN_CASE_FILE: &str = "gan-case.ntck";
pub const GAN_CONTROL_FILE: &str = "gan-control.ntck";
pub const PREDICTOR_FILE: &str = "predictor.ntck";
pub const GENERATED_FILE: &str = "generated.ehr";

fn resolve(dir: &Path, over: &Option<PathBuf>, name: &str) -> PathBuf {
    match over {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => dir.join(p),
        None => dir.join(name),
    }
}

pub fn corpus_path(cfg: &RunConfig, dir: &Path) -> PathBuf {
    resolve(dir, &cfg.paths.corpus, CORPUS_FILE)
}

pub fn embedding_path(cfg: &RunConfig, dir: &Path) -> PathBuf {
    resolve(dir, &cfg.paths.embedding, EMBEDDING_FILE)
}

pub fn gan_path(cfg: &RunConfig, dir: &Path, label: Label) -> PathBuf {
    match label {
        Label::Case => resolve(dir, &cfg.paths.gan_case, GAN_CASE_FILE),
        Label::Control => resolve(dir, &cfg.paths.gan_control, GAN_CONTROL_FILE),
    }
}

pub fn predictor_path(cfg: &RunConfig, dir: &Path) -> PathBuf {
    resolve(dir, &cfg.paths.predictor, PREDICTOR_FILE)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Missing-artifact error with the command that produces it.
fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "missing artifact {}; run `{produced_by}` first or point paths.* at it",
            path.display()
        )))
    }
}

fn artifact_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let (meta, _) = checkpoint::load(path)?;
    Ok(checkpoint::meta_map(&meta))
}

/// Verify one recorded provenance link: `consumer`'s metadata must carry
/// `key` equal to the hash of the upstream file as it exists now.
fn check_link(
    meta: &BTreeMap<String, String>,
    key: &str,
    upstream: &Path,
    consumer: &Path,
) -> Result<()> {
    let recorded = meta.get(key).ok_or_else(|| {
        Error::Mismatch(format!(
            "{} records no `{key}` provenance; rebuild it with the pipeline so \
             downstream checks can vouch for it",
            consumer.display()
        ))
    })?;
    let actual = sha256_file(upstream)?;
    if *recorded != actual {
        return Err(Error::Mismatch(format!(
            "{} was trained against a different {} (recorded {} vs present {}); \
             re-run the stage that produced it",
            consumer.display(),
            upstream.display(),
            &recorded[..12.min(recorded.len())],
            &actual[..12],
        )));
    }
    Ok(())
}

fn check_code_version(meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    if let Some(code) = meta.get("code") {
        if code != env!("CARGO_PKG_VERSION") {
            return Err(Error::Mismatch(format!(
                "{} was written by code version {code}, this binary is {}; retrain",
                path.display(),
                env!("CARGO_PKG_VERSION")
            )));
        }
    }
    Ok(())
}

fn class_of(label: Label) -> usize {
    match label {
        Label::Case => 1,
        Label::Control => 0,
    }
}

/// Stratified labeled/unlabeled partition of the train split: per class,
/// shuffle (seeded substream) and mark the first ceil(fraction * n) labeled.
pub fn labeled_split(
    cohort: &Cohort,
    fraction: f64,
    seed: u64,
) -> (Vec<(&PatientRecord, usize)>, Vec<&PatientRecord>) {
    use rand::seq::SliceRandom;
    let mut labeled = Vec::new();
    let mut rest = Vec::new();
    for label in [Label::Case, Label::Control] {
        let mut recs: Vec<&PatientRecord> = cohort
            .records_in(Split::Train)
            .into_iter()
            .filter(|r| r.label == label)
            .collect();
        recs.sort_by_key(|r| r.id);
        let mut r = rng::substream_indexed(seed, "pipeline/labeled-split", class_of(label) as u64);
        recs.shuffle(&mut r);
        let take = ((fraction * recs.len() as f64).ceil() as usize).min(recs.len());
        for (i, rec) in recs.into_iter().enumerate() {
            if i < take {
                labeled.push((rec, class_of(label)));
            } else {
                rest.push(rec);
            }
        }
    }
    labeled.sort_by_key(|(r, _)| r.id);
    rest.sort_by_key(|r| r.id);
    (labeled, rest)
}

fn split_items(cohort: &Cohort, split: Split) -> Vec<(&PatientRecord, usize)> {
    cohort.records_in(split).into_iter().map(|r| (r, class_of(r.label))).collect()
}

// ---------------------------------------------------------------------------
// gen-cohort

#[derive(Debug)]
pub struct CohortStage {
    pub path: PathBuf,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub cases: usize,
    pub controls: usize,
    pub stats: synth::GenStats,
}

impl CohortStage {
    pub fn render(&self) -> String {
        format!(
            "cohort: {} ({} train / {} val / {} test; {} cases, {} controls)\n\
             lengths {}..={} (mean {:.1}), dropped {}, truncated {}\n",
            self.path.display(),
            self.train,
            self.val,
            self.test,
            self.cases,
            self.controls,
            self.stats.len_min,
            self.stats.len_max,
            self.stats.len_sum as f64 / (self.train + self.val + self.test) as f64,
            self.stats.dropped_short,
            self.stats.truncated_long,
        )
    }
}

pub fn gen_cohort(cfg: &RunConfig, dir: &Path) -> Result<CohortStage> {
    fs::create_dir_all(dir)?;
    let (cohort, stats) = synth::generate_cohort(&cfg.cohort)?;
    let path = corpus_path(cfg, dir);
    synth::save_corpus(&path, &cohort)?;
    Ok(CohortStage {
        path,
        train: cohort.indices_in(Split::Train).len(),
        val: cohort.indices_in(Split::Val).len(),
        test: cohort.indices_in(Split::Test).len(),
        cases: cohort.count(Label::Case),
        controls: cohort.count(Label::Control),
        stats,
    })
}

// ---------------------------------------------------------------------------
// train-embedding

#[derive(Debug)]
pub struct EmbeddingStage {
    pub path: PathBuf,
    pub vocab: u32,
    pub dim: usize,
    pub pairs_per_epoch: u64,
}

impl EmbeddingStage {
    pub fn render(&self) -> String {
        format!(
            "embedding: {} ({} codes + END, dim {}, {} pairs/epoch)\n",
            self.path.display(),
            self.vocab,
            self.dim,
            self.pairs_per_epoch
        )
    }
}

pub fn train_embedding(cfg: &RunConfig, dir: &Path) -> Result<EmbeddingStage> {
    fs::create_dir_all(dir)?;
    let corpus = corpus_path(cfg, dir);
    require(&corpus, "gen-cohort")?;
    let cohort = synth::load_corpus(&corpus)?;
    let (table, stats) = embedding::train_embedding(&cohort, &cfg.embedding, cfg.seed)?;
    let path = embedding_path(cfg, dir);
    embedding::save_embedding_with(
        &path,
        &table,
        cfg.seed,
        &[("corpus_sha", sha256_file(&corpus)?), ("config_sha", cfg.hash())],
    )?;
    Ok(EmbeddingStage {
        path,
        vocab: table.vocab_size(),
        dim: table.dim(),
        pairs_per_epoch: stats.pairs_per_epoch,
    })
}

// ---------------------------------------------------------------------------
// train-gan

#[derive(Debug)]
pub struct GanStage {
    pub label: Label,
    pub path: PathBuf,
    pub records: usize,
    pub iterations: usize,
    pub converged_at: Option<usize>,
    pub final_loss_g: f64,
    pub final_d_real: f64,
    pub final_d_fake: f64,
}

impl GanStage {
    pub fn render(&self) -> String {
        format!(
            "gan[{}]: {} ({} records, {} iters{}, loss_g {:.4}, D(real) {:.3}, D(fake) {:.3})\n",
            match self.label {
                Label::Case => "case",
                Label::Control => "control",
            },
            self.path.display(),
            self.records,
            self.iterations,
            match self.converged_at {
                Some(i) => format!(", converged at {i}"),
                None => String::new(),
            },
            self.final_loss_g,
            self.final_d_real,
            self.final_d_fake,
        )
    }
}

/// Train one transition GAN per class on the labeled portion of the train
/// split (`ssl.labeled_fraction`; 1.0 uses every train record). Writes one
/// checkpoint and one history TSV per class.
pub fn train_gan(cfg: &RunConfig, dir: &Path) -> Result<Vec<GanStage>> {
    fs::create_dir_all(dir)?;
    let corpus = corpus_path(cfg, dir);
    require(&corpus, "gen-cohort")?;
    let emb_path = embedding_path(cfg, dir);
    require(&emb_path, "train-embedding")?;
    let emb_meta = artifact_meta(&emb_path)?;
    check_code_version(&emb_meta, &emb_path)?;
    check_link(&emb_meta, "corpus_sha", &corpus, &emb_path)?;

    let cohort = synth::load_corpus(&corpus)?;
    let table = embedding::load_embedding(&emb_path)?;
    let emb_sha = sha256_file(&emb_path)?;
    let (labeled, _) = labeled_split(&cohort, cfg.ssl.labeled_fraction, cfg.seed);

    let mut out = Vec::new();
    for label in [Label::Case, Label::Control] {
        let recs: Vec<&PatientRecord> =
            labeled.iter().filter(|(r, _)| r.label == label).map(|(r, _)| *r).collect();
        let name = match label {
            Label::Case => "case",
            Label::Control => "control",
        };
        let seed = rng::substream(cfg.seed, &format!("pipeline/gan-{name}")).random::<u64>();
        let (model, history) = gan::train_gan(&recs, &table, &cfg.gan, seed)?;
        let path = gan_path(cfg, dir, label);
        gan::save_gan_with(
            &path,
            &model,
            seed,
            &[
                ("code", env!("CARGO_PKG_VERSION").to_string()),
                ("embedding_sha", emb_sha.clone()),
                ("config_sha", cfg.hash()),
                ("class", class_of(label).to_string()),
            ],
        )?;
        let hist_path = dir.join(format!("gan-{name}-history.tsv"));
        fs::write(&hist_path, history.to_tsv())?;
        let last = history.records.last().ok_or_else(|| {
            Error::invalid("gan training produced no iterations (max_iterations 0?)")
        })?;
        out.push(GanStage {
            label,
            path,
            records: recs.len(),
            iterations: history.records.len(),
            converged_at: history.converged_at,
            final_loss_g: last.loss_g,
            final_d_real: last.d_real,
            final_d_fake: last.d_fake,
        });
    }
    Ok(out)
}

fn load_gan_checked(
    path: &Path,
    emb_path: &Path,
    produced_by: &str,
) -> Result<(GanModel, String)> {
    require(path, produced_by)?;
    let meta = artifact_meta(path)?;
    check_code_version(&meta, path)?;
    check_link(&meta, "embedding_sha", emb_path, path)?;
    Ok((gan::load_gan(path)?, sha256_file(path)?))
}

// ---------------------------------------------------------------------------
// sample

#[derive(Debug)]
pub struct SampleStage {
    pub path: PathBuf,
    pub per_class: Vec<(Label, gan::GenCorpusStats)>,
}

impl SampleStage {
    pub fn render(&self) -> String {
        let mut s = format!("generated corpus: {}\n", self.path.display());
        for (label, st) in &self.per_class {
            s.push_str(&format!(
                "  {}: {} records (mean len {:.1}, {} without end mark, {} empty decodes)\n",
                match label {
                    Label::Case => "case",
                    Label::Control => "control",
                },
                st.generated,
                st.mean_len,
                st.missing_end,
                st.skipped_empty,
            ));
        }
        s
    }
}

/// Draw transition-sampled synthetic records from both class GANs and write
/// them as a corpus file (all rows in the train section, labels preserved).
pub fn sample(cfg: &RunConfig, dir: &Path) -> Result<SampleStage> {
    fs::create_dir_all(dir)?;
    let corpus = corpus_path(cfg, dir);
    require(&corpus, "gen-cohort")?;
    let emb_path = embedding_path(cfg, dir);
    require(&emb_path, "train-embedding")?;
    let cohort = synth::load_corpus(&corpus)?;
    let table = embedding::load_embedding(&emb_path)?;

    let mut records = Vec::new();
    let mut per_class = Vec::new();
    let mut chain = String::new();
    for label in [Label::Case, Label::Control] {
        let (model, sha) = load_gan_checked(&gan_path(cfg, dir, label), &emb_path, "train-gan")?;
        chain.push_str(&sha);
        let source: Vec<&PatientRecord> = cohort
            .records_in(Split::Train)
            .into_iter()
            .filter(|r| r.label == label)
            .collect();
        let count = if cfg.eval.gen_count == 0 { source.len() } else { cfg.eval.gen_count };
        let name = match label {
            Label::Case => "case",
            Label::Control => "control",
        };
        let seed = rng::substream(cfg.seed, &format!("pipeline/sample-{name}")).random::<u64>();
        let (recs, stats) =
            gan::generate_corpus(&model, &table, &source, count, label, records.len() as u64, seed)?;
        records.extend(recs);
        per_class.push((label, stats));
    }

    let mut h = Sha256::new();
    h.update(chain.as_bytes());
    let tag = format!("{:x}", h.finalize());
    let n = records.len();
    let generated = Cohort {
        records,
        splits: vec![Split::Train; n],
        vocab: cohort.vocab,
        spec_hash: format!("generated-from-{}", &tag[..16]),
        seed: cfg.seed,
    };
    let path = resolve(dir, &None, GENERATED_FILE);
    synth::save_corpus(&path, &generated)?;
    Ok(SampleStage { path, per_class })
}

// ---------------------------------------------------------------------------
// train-predictor

#[derive(Debug)]
pub struct PredictorStage {
    pub path: PathBuf,
    pub mode: TrainMode,
    pub labeled: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub stopped_early: bool,
}

impl PredictorStage {
    pub fn render(&self) -> String {
        format!(
            "predictor[{}]: {} ({} labeled, {} epochs{}, best val AUROC {:.4} at epoch {})\n",
            self.mode.name(),
            self.path.display(),
            self.labeled,
            self.epochs,
            if self.stopped_early { ", early stop" } else { "" },
            self.best_val_auroc,
            self.best_epoch,
        )
    }
}

/// Train the risk predictor under `ssl.mode`. `ssl-gan` consumes both class
/// GAN artifacts; `rand` draws weighted random-label augments from the
/// unlabeled pool; `full` merges the unlabeled pool with its real labels;
/// `basic` uses the labeled subset alone.
pub fn train_predictor(cfg: &RunConfig, dir: &Path) -> Result<PredictorStage> {
    fs::create_dir_all(dir)?;
    let corpus = corpus_path(cfg, dir);
    require(&corpus, "gen-cohort")?;
    let emb_path = embedding_path(cfg, dir);
    require(&emb_path, "train-embedding")?;
    let emb_meta = artifact_meta(&emb_path)?;
    check_code_version(&emb_meta, &emb_path)?;
    check_link(&emb_meta, "corpus_sha", &corpus, &emb_path)?;
    let cohort = synth::load_corpus(&corpus)?;
    let table = embedding::load_embedding(&emb_path)?;
    let emb_sha = sha256_file(&emb_path)?;

    let (labeled, unlabeled) = labeled_split(&cohort, cfg.ssl.labeled_fraction, cfg.seed);
    let data = TrainData {
        labeled: labeled.clone(),
        val: split_items(&cohort, Split::Val),
        full_pool: unlabeled.iter().map(|r| (*r, class_of(r.label))).collect(),
        table: &table,
    };

    let mut extra = vec![
        ("code", env!("CARGO_PKG_VERSION").to_string()),
        ("embedding_sha", emb_sha),
        ("config_sha", cfg.hash()),
        ("mode", cfg.ssl.mode.name().to_string()),
        ("mu", cfg.ssl.mu.to_string()),
    ];
    let mut rand_aug: Option<RandAugment> = None;
    let mut gan_aug: Option<TransitionAugment> = None;
    match cfg.ssl.mode {
        TrainMode::Basic | TrainMode::Full => {}
        TrainMode::Rand => {
            if unlabeled.is_empty() {
                return Err(Error::invalid(
                    "rand mode needs an unlabeled pool; lower ssl.labeled_fraction",
                ));
            }
            rand_aug = Some(RandAugment::new(
                unlabeled.clone(),
                &table,
                cfg.predictor.classes,
                cfg.seed,
            )?);
        }
        TrainMode::SslGan => {
            let mut models = Vec::new();
            for label in [Label::Control, Label::Case] {
                let (m, sha) =
                    load_gan_checked(&gan_path(cfg, dir, label), &emb_path, "train-gan")?;
                let key = match label {
                    Label::Case => "gan_case_sha",
                    Label::Control => "gan_control_sha",
                };
                extra.push((key, sha));
                models.push((class_of(label), m));
            }
            gan_aug = Some(TransitionAugment::new(
                models,
                &table,
                cfg.seed,
                cfg.ssl.resample_per_epoch,
            )?);
        }
    }
    let aug: Option<&mut dyn Augment> = match (&mut rand_aug, &mut gan_aug) {
        (Some(a), _) => Some(a),
        (_, Some(a)) => Some(a),
        _ => None,
    };

    let mut model = PredictorModel::new(cfg.predictor.clone(), cfg.seed)?;
    let history = predictor::train(&mut model, &data, &cfg.ssl, aug)?;
    let path = predictor_path(cfg, dir);
    predictor::save_predictor_with(&path, &model, cfg.seed, &extra)?;
    fs::write(dir.join("predictor-history.tsv"), history.to_tsv())?;
    Ok(PredictorStage {
        path,
        mode: cfg.ssl.mode,
        labeled: labeled.len(),
        epochs: history.records.len(),
        best_epoch: history.best_epoch,
        best_val_auroc: history.best_val_auroc,
        stopped_early: history.stopped_early,
    })
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug)]
pub struct PredictorScores {
    pub train_auroc: f64,
    pub val_auroc: f64,
    pub test_auroc: f64,
    pub test_accuracy: f64,
}

#[derive(Debug)]
pub struct EvalStage {
    pub report_path: PathBuf,
    pub fidelity: Option<FidelityReport>,
    pub gen_stats: Option<gan::GenCorpusStats>,
    pub scores: Option<PredictorScores>,
}

impl EvalStage {
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let (Some(f), Some(g)) = (&self.fidelity, &self.gen_stats) {
            s.push_str(&f.render());
            s.push_str(&format!(
                "  generated {} case records (mean len {:.1}, {} without end mark)\n",
                g.generated, g.mean_len, g.missing_end
            ));
        }
        if let Some(p) = &self.scores {
            s.push_str(&format!(
                "predictor AUROC: train {:.4}  val {:.4}  test {:.4}  (test accuracy {:.4})\n",
                p.train_auroc, p.val_auroc, p.test_auroc, p.test_accuracy
            ));
        }
        if s.is_empty() {
            s.push_str("nothing to evaluate: no gan or predictor artifact found\n");
        }
        s
    }
}

/// Score whatever trained artifacts exist against the corpus: case-GAN
/// fidelity versus the training cases, and predictor AUROC per split.
/// Every loaded artifact must hash-match the provenance recorded by its
/// downstream consumers; a broken chain is an error, not a warning.
pub fn evaluate(cfg: &RunConfig, dir: &Path) -> Result<EvalStage> {
    fs::create_dir_all(dir)?;
    let corpus = corpus_path(cfg, dir);
    require(&corpus, "gen-cohort")?;
    let emb_path = embedding_path(cfg, dir);
    require(&emb_path, "train-embedding")?;
    let emb_meta = artifact_meta(&emb_path)?;
    check_code_version(&emb_meta, &emb_path)?;
    check_link(&emb_meta, "corpus_sha", &corpus, &emb_path)?;
    let cohort = synth::load_corpus(&corpus)?;
    let table = embedding::load_embedding(&emb_path)?;

    let mut fidelity = None;
    let mut gen_stats = None;
    let gan_case = gan_path(cfg, dir, Label::Case);
    if gan_case.exists() {
        let (model, _) = load_gan_checked(&gan_case, &emb_path, "train-gan")?;
        let cases: Vec<&PatientRecord> = cohort
            .records_in(Split::Train)
            .into_iter()
            .filter(|r| r.label == Label::Case)
            .collect();
        let count = if cfg.eval.gen_count == 0 { cases.len() } else { cfg.eval.gen_count };
        let seed = rng::substream(cfg.seed, "pipeline/eval-sample").random::<u64>();
        let (gen, stats) =
            gan::generate_corpus(&model, &table, &cases, count, Label::Case, 0, seed)?;
        let gen_refs: Vec<&PatientRecord> = gen.iter().collect();
        fidelity = Some(eval::fidelity(&cases, &gen_refs, cfg.eval.top_k)?);
        gen_stats = Some(stats);
    }

    let mut scores = None;
    let pred_path = predictor_path(cfg, dir);
    if pred_path.exists() {
        let meta = artifact_meta(&pred_path)?;
        check_code_version(&meta, &pred_path)?;
        check_link(&meta, "embedding_sha", &emb_path, &pred_path)?;
        // a predictor trained against GANs must still match them if present
        for (key, label) in
            [("gan_case_sha", Label::Case), ("gan_control_sha", Label::Control)]
        {
            let p = gan_path(cfg, dir, label);
            if meta.contains_key(key) && p.exists() {
                check_link(&meta, key, &p, &pred_path)?;
            }
        }
        let model = predictor::load_predictor(&pred_path)?;
        if model.cfg.embed_dim != table.dim() {
            return Err(Error::Mismatch(format!(
                "predictor embed_dim {} vs embedding dim {}",
                model.cfg.embed_dim,
                table.dim()
            )));
        }
        let score = |split: Split| -> Result<f64> {
            predictor::score_auroc(&model, &split_items(&cohort, split), &table)
        };
        let test_items = split_items(&cohort, Split::Test);
        let probs = predictor::predict_proba(
            &model,
            &test_items.iter().map(|&(r, _)| r).collect::<Vec<_>>(),
            &table,
        )?;
        let test_labels: Vec<bool> = test_items.iter().map(|&(_, y)| y == 1).collect();
        scores = Some(PredictorScores {
            train_auroc: score(Split::Train)?,
            val_auroc: score(Split::Val)?,
            test_auroc: score(Split::Test)?,
            test_accuracy: eval::accuracy(&probs, &test_labels)?,
        });
    }

    let stage = EvalStage { report_path: dir.join("evaluation.txt"), fidelity, gen_stats, scores };
    let mut text = format!("config {}\n", cfg.hash());
    text.push_str(&stage.render());
    fs::write(&stage.report_path, &text)?;
    Ok(stage)
}

// ---------------------------------------------------------------------------
// sweep

/// One predictor run under `mode`: train on the labeled subset (fixed by
/// `split_seed` so every mode and repeat sees the same labels), score the
/// test split. GAN models are borrowed so a grid cell can share them across
/// its repeat seeds; they are cloned into the augmenter per run.
#[allow(clippy::too_many_arguments)]
pub fn ssl_run(
    cohort: &Cohort,
    table: &EmbeddingTable,
    cfg: &RunConfig,
    mode: TrainMode,
    mu: f64,
    gans: Option<(&GanModel, &GanModel)>, // (control, case)
    group: &str,
    split_seed: u64,
    run_seed: u64,
) -> Result<(RunSummary, TrainHistory)> {
    let (labeled, unlabeled) = labeled_split(cohort, cfg.ssl.labeled_fraction, split_seed);
    let data = TrainData {
        labeled,
        val: split_items(cohort, Split::Val),
        full_pool: unlabeled.iter().map(|r| (*r, class_of(r.label))).collect(),
        table,
    };
    let ssl = crate::predictor::SslConfig { mode, mu, seed: run_seed, ..cfg.ssl.clone() };

    let mut rand_aug: Option<RandAugment> = None;
    let mut gan_aug: Option<TransitionAugment> = None;
    match mode {
        TrainMode::Basic | TrainMode::Full => {}
        TrainMode::Rand => {
            rand_aug = Some(RandAugment::new(
                unlabeled.clone(),
                table,
                cfg.predictor.classes,
                run_seed,
            )?);
        }
        TrainMode::SslGan => {
            let (ctrl, case) = gans.ok_or_else(|| {
                Error::invalid("ssl-gan run needs control and case GAN models")
            })?;
            gan_aug = Some(TransitionAugment::new(
                vec![(0, ctrl.clone()), (1, case.clone())],
                table,
                run_seed,
                cfg.ssl.resample_per_epoch,
            )?);
        }
    }
    let aug: Option<&mut dyn Augment> = match (&mut rand_aug, &mut gan_aug) {
        (Some(a), _) => Some(a),
        (_, Some(a)) => Some(a),
        _ => None,
    };

    let mut model = PredictorModel::new(cfg.predictor.clone(), run_seed)?;
    let history = predictor::train(&mut model, &data, &ssl, aug)?;
    let test_auroc = predictor::score_auroc(&model, &split_items(cohort, Split::Test), table)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("test_auroc".to_string(), test_auroc);
    metrics.insert("val_auroc".to_string(), history.best_val_auroc);
    Ok((RunSummary { group: group.to_string(), seed: run_seed, metrics }, history))
}

/// Train the per-class GAN pair for one sweep cell on the labeled subset.
fn cell_gans(
    cohort: &Cohort,
    table: &EmbeddingTable,
    cfg: &RunConfig,
    rho: f64,
    cell: &str,
) -> Result<(GanModel, GanModel)> {
    let gan_cfg = gan::GanConfig { rho, ..cfg.gan.clone() };
    let (labeled, _) = labeled_split(cohort, cfg.ssl.labeled_fraction, cfg.seed);
    let mut trained = Vec::new();
    for label in [Label::Control, Label::Case] {
        let recs: Vec<&PatientRecord> =
            labeled.iter().filter(|(r, _)| r.label == label).map(|(r, _)| *r).collect();
        let name = match label {
            Label::Case => "case",
            Label::Control => "control",
        };
        let seed = rng::substream(cfg.seed, &format!("sweep/{cell}/gan-{name}")).random::<u64>();
        let (model, _) = gan::train_gan(&recs, table, &gan_cfg, seed)?;
        trained.push(model);
    }
    let case = trained.pop().expect("two models");
    let control = trained.pop().expect("two models");
    Ok((control, case))
}

#[derive(Debug)]
pub struct SweepStage {
    pub rho_groups: Vec<GroupSummary>,
    pub mu_groups: Vec<GroupSummary>,
    pub rho_table_path: PathBuf,
    pub mu_table_path: PathBuf,
}

impl SweepStage {
    pub fn render(&self) -> String {
        format!(
            "rho sweep ({}):\n{}\nmu sweep ({}):\n{}",
            self.rho_table_path.display(),
            eval::render_groups(&self.rho_groups),
            self.mu_table_path.display(),
            eval::render_groups(&self.mu_groups),
        )
    }
}

/// Grid experiments: the adversarial-weight grid under ssl-gan, and the
/// augmentation-weight grid across modes (ssl-gan / rand / full, with one
/// mode-independent basic baseline). Each cell trains its GAN pair once and
/// repeats the predictor over `sweep.seeds` seeds; tables aggregate medians.
pub fn sweep(cfg: &RunConfig, dir: &Path) -> Result<SweepStage> {
    fs::create_dir_all(dir)?;
    let corpus = corpus_path(cfg, dir);
    require(&corpus, "gen-cohort")?;
    let emb_path = embedding_path(cfg, dir);
    require(&emb_path, "train-embedding")?;
    let emb_meta = artifact_meta(&emb_path)?;
    check_code_version(&emb_meta, &emb_path)?;
    check_link(&emb_meta, "corpus_sha", &corpus, &emb_path)?;
    let cohort = synth::load_corpus(&corpus)?;
    let table = embedding::load_embedding(&emb_path)?;

    let run_seeds: Vec<u64> =
        (0..cfg.sweep.seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    // Grid cells are independent (named substreams, shared inputs by ref), so
    // they fan out over rayon; indexed collect keeps output order fixed and
    // results identical at any thread count.
    let baseline = |seed: u64| {
        ssl_run(&cohort, &table, cfg, TrainMode::Basic, 0.0, None, "basic", cfg.seed, seed)
            .map(|(run, _)| run)
    };
    let mut rho_runs: Vec<RunSummary> =
        run_seeds.par_iter().map(|&seed| baseline(seed)).collect::<Result<_>>()?;
    let rho_cells: Vec<Vec<RunSummary>> = cfg
        .sweep
        .rho_grid
        .par_iter()
        .enumerate()
        .map(|(i, &rho)| {
            let (control, case) = cell_gans(&cohort, &table, cfg, rho, &format!("rho{i}"))?;
            run_seeds
                .iter()
                .map(|&seed| {
                    ssl_run(
                        &cohort,
                        &table,
                        cfg,
                        TrainMode::SslGan,
                        cfg.ssl.mu,
                        Some((&control, &case)),
                        &format!("rho={rho}"),
                        cfg.seed,
                        seed,
                    )
                    .map(|(run, _)| run)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    rho_runs.extend(rho_cells.into_iter().flatten());
    let rho_groups = eval::compare_runs(&rho_runs);
    let rho_table_path = dir.join("sweep-rho.txt");
    fs::write(&rho_table_path, eval::render_groups(&rho_groups))?;
    fs::write(dir.join("sweep-rho.jsonl"), eval::runs_to_jsonl(&rho_runs))?;

    let mut mu_runs: Vec<RunSummary> =
        run_seeds.par_iter().map(|&seed| baseline(seed)).collect::<Result<_>>()?;
    let (control, case) = cell_gans(&cohort, &table, cfg, cfg.gan.rho, "mu")?;
    let mu_jobs: Vec<(f64, TrainMode, bool)> = cfg
        .sweep
        .mu_grid
        .iter()
        .flat_map(|&mu| {
            [(TrainMode::SslGan, true), (TrainMode::Rand, false), (TrainMode::Full, false)]
                .map(|(mode, needs_gan)| (mu, mode, needs_gan))
        })
        .collect();
    let mu_cells: Vec<Vec<RunSummary>> = mu_jobs
        .par_iter()
        .map(|&(mu, mode, needs_gan)| {
            run_seeds
                .iter()
                .map(|&seed| {
                    let gans = if needs_gan { Some((&control, &case)) } else { None };
                    ssl_run(
                        &cohort,
                        &table,
                        cfg,
                        mode,
                        mu,
                        gans,
                        &format!("mu={mu}/{}", mode.name()),
                        cfg.seed,
                        seed,
                    )
                    .map(|(run, _)| run)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    mu_runs.extend(mu_cells.into_iter().flatten());
    let mu_groups = eval::compare_runs(&mu_runs);
    let mu_table_path = dir.join("sweep-mu.txt");
    fs::write(&mu_table_path, eval::render_groups(&mu_groups))?;
    fs::write(dir.join("sweep-mu.jsonl"), eval::runs_to_jsonl(&mu_runs))?;

    Ok(SweepStage { rho_groups, mu_groups, rho_table_path, mu_table_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small-but-valid overrides: cohort lengths are clamped to >= 50 events
    /// by the generator, so speed comes from record counts and tiny nets.
    fn tiny_config(root: &str) -> RunConfig {
        let text = format!(
            "seed = 5\n\
             cohort.vocab_size = 60\n\
             cohort.clusters = 6\n\
             cohort.cluster_size = 8\n\
             cohort.signature_clusters = 3\n\
             cohort.cases = 24\n\
             cohort.controls = 36\n\
             embedding.dim = 12\n\
             embedding.epochs = 1\n\
             gan.latent = 8\n\
             gan.seq_rows = 30\n\
             gan.maps = 6\n\
             gan.widths = 2,3\n\
             gan.batch = 4\n\
             gan.max_iterations = 2\n\
             predictor.maps = 4\n\
             predictor.widths = 2,3\n\
             predictor.max_epochs = 2\n\
             predictor.batch = 8\n\
             predictor.patience = 2\n\
             predictor.mu = 0.4\n\
             sweep.rho_grid = 0,1\n\
             sweep.mu_grid = 0.4\n\
             sweep.seeds = 2\n\
             {root}"
        );
        let mut cfg = RunConfig::parse_str(&text).unwrap();
        cfg.resolve().unwrap();
        cfg
    }

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("ehrgan-pipeline-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn stages_chain_end_to_end_and_rerun_identically() {
        let cfg = tiny_config("");
        let dir = tmp("chain");
        let c1 = gen_cohort(&cfg, &dir).unwrap();
        assert_eq!(c1.train + c1.val + c1.test, 60);
        let first = fs::read(corpus_path(&cfg, &dir)).unwrap();
        gen_cohort(&cfg, &dir).unwrap();
        assert_eq!(first, fs::read(corpus_path(&cfg, &dir)).unwrap(), "regen must be bitwise");

        let e = train_embedding(&cfg, &dir).unwrap();
        assert_eq!(e.dim, 12);
        let gans = train_gan(&cfg, &dir).unwrap();
        assert_eq!(gans.len(), 2);
        assert!(gans.iter().all(|g| g.iterations == 2));

        let s = sample(&cfg, &dir).unwrap();
        let gen = synth::load_corpus(&s.path).unwrap();
        assert_eq!(gen.records.len(), s.per_class.iter().map(|(_, st)| st.generated).sum::<usize>());

        let p = train_predictor(&cfg, &dir).unwrap();
        assert!(p.epochs >= 1 && p.labeled > 0);
        let ev = evaluate(&cfg, &dir).unwrap();
        assert!(ev.fidelity.is_some() && ev.scores.is_some());
        assert!(ev.report_path.exists());
    }

    #[test]
    fn evaluate_refuses_a_swapped_upstream() {
        let cfg = tiny_config("");
        let dir = tmp("mismatch");
        gen_cohort(&cfg, &dir).unwrap();
        train_embedding(&cfg, &dir).unwrap();
        train_gan(&cfg, &dir).unwrap();

        // regenerate the corpus with another seed: embedding chain now stale
        let mut spec2 = cfg.cohort.clone();
        spec2.seed = 99;
        let (cohort2, _) = synth::generate_cohort(&spec2).unwrap();
        synth::save_corpus(&corpus_path(&cfg, &dir), &cohort2).unwrap();

        let err = evaluate(&cfg, &dir).unwrap_err();
        assert!(matches!(err, Error::Mismatch(_)), "got {err:?}");
    }

    #[test]
    fn missing_artifacts_name_the_producing_command() {
        let cfg = tiny_config("");
        let dir = tmp("missing");
        let err = train_embedding(&cfg, &dir).unwrap_err().to_string();
        assert!(err.contains("gen-cohort"), "{err}");
        gen_cohort(&cfg, &dir).unwrap();
        let err = train_predictor(&cfg, &dir).unwrap_err().to_string();
        assert!(err.contains("train-embedding"), "{err}");
    }

    #[test]
    fn labeled_split_is_stratified_and_seed_stable() {
        let cfg = tiny_config("");
        let (cohort, _) = synth::generate_cohort(&cfg.cohort).unwrap();
        let (lab, rest) = labeled_split(&cohort, 0.5, 7);
        let (lab2, _) = labeled_split(&cohort, 0.5, 7);
        assert_eq!(
            lab.iter().map(|(r, _)| r.id).collect::<Vec<_>>(),
            lab2.iter().map(|(r, _)| r.id).collect::<Vec<_>>()
        );
        let train = cohort.records_in(Split::Train).len();
        assert_eq!(lab.len() + rest.len(), train);
        for label in [Label::Case, Label::Control] {
            let total =
                cohort.records_in(Split::Train).iter().filter(|r| r.label == label).count();
            let got = lab.iter().filter(|(r, _)| r.label == label).count();
            assert_eq!(got, total.div_ceil(2), "class {label:?}");
        }
        let (all, none) = labeled_split(&cohort, 1.0, 7);
        assert_eq!(all.len(), train);
        assert!(none.is_empty());
    }

    #[test]
    fn sweep_emits_one_group_per_cell() {
        let cfg = tiny_config("predictor.labeled_fraction = 0.4\n");
        let dir = tmp("sweep");
        gen_cohort(&cfg, &dir).unwrap();
        train_embedding(&cfg, &dir).unwrap();
        let sw = sweep(&cfg, &dir).unwrap();
        // rho table: basic + one group per rho grid value
        assert_eq!(sw.rho_groups.len(), 1 + cfg.sweep.rho_grid.len());
        // mu table: basic + 3 modes per mu value
        assert_eq!(sw.mu_groups.len(), 1 + 3 * cfg.sweep.mu_grid.len());
        for g in sw.rho_groups.iter().chain(&sw.mu_groups) {
            assert_eq!(g.metrics["test_auroc"].n, cfg.sweep.seeds, "group {}", g.group);
        }
        assert!(sw.rho_table_path.exists() && sw.mu_table_path.exists());
    }
}
