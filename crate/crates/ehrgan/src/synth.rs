//! Synthetic patient cohort generation.
//!
//! Records are sequences of coded events (diagnoses and medications) bucketed
//! into 90-day windows. Co-occurrence structure comes from latent "clusters"
//! of codes that activate together; class signal comes from a per-patient
//! risk factor that drives the activation of a few signature clusters. The
//! case and control risk distributions overlap, which caps how separable the
//! classes are — the knob that keeps a plain supervised baseline in a
//! mid-0.9s AUROC regime with headroom above it.
//!
//! Every patient draws from an independent seeded stream, so generation is
//! order-independent and any single record can be reproduced in isolation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Record length bounds; shorter records are dropped, longer ones truncated
/// to the most recent events.
pub const MIN_LEN: usize = 50;
pub const MAX_LEN: usize = 250;

/// Each window covers 90 days of history.
pub const WINDOW_DAYS: u32 = 90;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Diagnosis,
    Medication,
}

/// Code ids are dense `0..size`; the first 60% are diagnoses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Vocabulary {
        Vocabulary { size }
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn kind(&self, code: u32) -> Kind {
        if code < self.size * 6 / 10 {
            Kind::Diagnosis
        } else {
            Kind::Medication
        }
    }

    pub fn display(&self, code: u32) -> String {
        match self.kind(code) {
            Kind::Diagnosis => format!("D{code:04}"),
            Kind::Medication => format!("M{code:04}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Control,
    Case,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Control => 0,
            Label::Case => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// 90-day window index; non-decreasing within a record.
    pub window: u16,
    pub code: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub id: u64,
    pub label: Label,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A cohort plus its stratified split assignment (parallel to `records`).
#[derive(Debug, Clone)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub splits: Vec<Split>,
    pub vocab: Vocabulary,
    /// Hash of the generating spec ("external" for loaded, unhashed corpora).
    pub spec_hash: String,
    pub seed: u64,
}

impl Cohort {
    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn records_in(&self, split: Split) -> Vec<&PatientRecord> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(r, _)| r)
            .collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }
}

/// Generation parameters. Codes are striped across clusters (cluster `k`
/// owns codes `k, k+K, k+2K, ...`), the first `signature_clusters` clusters
/// carry the class signal.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub vocab_size: u32,
    pub clusters: u32,
    pub cluster_size: u32,
    pub signature_clusters: u32,
    /// Probability that a code of an active cluster enters the patient pool.
    pub co_draw: f64,
    /// Activation probability of non-signature clusters.
    pub base_cluster_rate: f64,
    /// Mean / sd of the latent risk factor per class; signature clusters
    /// activate with probability equal to the (clamped) risk draw.
    pub case_risk_mean: f64,
    pub case_risk_sd: f64,
    pub control_risk_mean: f64,
    pub control_risk_sd: f64,
    /// Probability an event is uniform background noise instead of a pool code.
    pub noise_rate: f64,
    pub cases: u32,
    pub controls: u32,
    /// Record length is Gamma(length_shape, length_scale) truncated to
    /// `[MIN_LEN, MAX_LEN]` by rejection.
    pub length_shape: f64,
    pub length_scale: f64,
    pub windows_min: u16,
    pub windows_max: u16,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            vocab_size: 2000,
            clusters: 24,
            cluster_size: 12,
            signature_clusters: 10,
            co_draw: 0.55,
            base_cluster_rate: 0.12,
            case_risk_mean: 0.55,
            case_risk_sd: 0.15,
            control_risk_mean: 0.20,
            control_risk_sd: 0.12,
            noise_rate: 0.30,
            cases: 1000,
            controls: 2000,
            length_shape: 20.0,
            length_scale: 5.0,
            windows_min: 6,
            windows_max: 12,
            seed: 17,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::invalid("cohort: vocab_size must be > 0"));
        }
        if self.clusters == 0 || self.cluster_size == 0 {
            return Err(Error::invalid("cohort: clusters and cluster_size must be > 0"));
        }
        if self.clusters * self.cluster_size > self.vocab_size {
            return Err(Error::invalid(format!(
                "cohort: {} clusters x {} codes exceed vocab {}",
                self.clusters, self.cluster_size, self.vocab_size
            )));
        }
        if self.signature_clusters == 0 || self.signature_clusters >= self.clusters {
            return Err(Error::invalid(
                "cohort: signature_clusters must be in [1, clusters)",
            ));
        }
        for (name, p) in [
            ("co_draw", self.co_draw),
            ("base_cluster_rate", self.base_cluster_rate),
            ("case_risk_mean", self.case_risk_mean),
            ("control_risk_mean", self.control_risk_mean),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("cohort: {name} = {p} outside [0,1]")));
            }
        }
        for (name, p) in [("case_risk_sd", self.case_risk_sd), ("control_risk_sd", self.control_risk_sd)]
        {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::invalid(format!("cohort: {name} = {p} must be >= 0")));
            }
        }
        if self.cases == 0 || self.controls == 0 {
            return Err(Error::invalid("cohort: both classes need at least one patient"));
        }
        if self.windows_min == 0 || self.windows_min > self.windows_max {
            return Err(Error::invalid("cohort: need 1 <= windows_min <= windows_max"));
        }
        if !(self.length_shape.is_finite() && self.length_shape > 0.0)
            || !(self.length_scale.is_finite() && self.length_scale > 0.0)
        {
            return Err(Error::invalid("cohort: length_shape and length_scale must be > 0"));
        }
        // The truncated-gamma length model must put real mass on [50, 250]:
        // probe the distribution rather than trusting closed forms.
        let gamma = Gamma::new(self.length_shape, self.length_scale)
            .map_err(|e| Error::invalid(format!("cohort: gamma length model: {e}")))?;
        let mut probe = rng::substream(self.seed, "cohort.length_probe");
        let hits = (0..4000)
            .map(|_| gamma.sample(&mut probe))
            .filter(|&l| (MIN_LEN as f64..=MAX_LEN as f64 + 1.0).contains(&l))
            .count();
        if hits < 20 {
            return Err(Error::invalid(format!(
                "cohort: length distribution Gamma({}, {}) has ~no mass in [{MIN_LEN},{MAX_LEN}]",
                self.length_shape, self.length_scale
            )));
        }
        Ok(())
    }

    /// Canonical `key=value` listing; hashed into artifact provenance.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("base_cluster_rate", format!("{}", self.base_cluster_rate));
        kv("case_risk_mean", format!("{}", self.case_risk_mean));
        kv("case_risk_sd", format!("{}", self.case_risk_sd));
        kv("cases", format!("{}", self.cases));
        kv("cluster_size", format!("{}", self.cluster_size));
        kv("clusters", format!("{}", self.clusters));
        kv("co_draw", format!("{}", self.co_draw));
        kv("control_risk_mean", format!("{}", self.control_risk_mean));
        kv("control_risk_sd", format!("{}", self.control_risk_sd));
        kv("controls", format!("{}", self.controls));
        kv("length_scale", format!("{}", self.length_scale));
        kv("length_shape", format!("{}", self.length_shape));
        kv("noise_rate", format!("{}", self.noise_rate));
        kv("seed", format!("{}", self.seed));
        kv("signature_clusters", format!("{}", self.signature_clusters));
        kv("vocab_size", format!("{}", self.vocab_size));
        kv("windows_max", format!("{}", self.windows_max));
        kv("windows_min", format!("{}", self.windows_min));
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex16(&digest)
    }

    /// Codes of cluster `k`, striped across the id space.
    pub fn cluster_codes(&self, k: u32) -> Vec<u32> {
        (0..self.cluster_size).map(|i| k + i * self.clusters).collect()
    }
}

pub(crate) fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Outcome of the length policy on one raw event list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Clamped {
    /// Events sorted by window; `truncated` if the oldest were cut to fit.
    Kept { events: Vec<Event>, truncated: bool },
    /// Fewer than `MIN_LEN` events: the record is unusable.
    DroppedShort,
}

/// Stable-sort events by window, keep the most recent `MAX_LEN`, drop the
/// record entirely below `MIN_LEN`.
pub fn clamp_and_order(mut events: Vec<Event>) -> Clamped {
    events.sort_by_key(|e| e.window);
    if events.len() < MIN_LEN {
        return Clamped::DroppedShort;
    }
    let truncated = events.len() > MAX_LEN;
    if truncated {
        events.drain(..events.len() - MAX_LEN);
    }
    Clamped::Kept { events, truncated }
}

/// Side statistics from generation, written next to the corpus.
#[derive(Debug, Clone, Default)]
pub struct GenStats {
    pub dropped_short: u64,
    pub truncated_long: u64,
    pub len_sum: u64,
    pub len_min: usize,
    pub len_max: usize,
    /// Per-cluster activation counts, split by class: (case, control).
    pub cluster_activations: Vec<(u64, u64)>,
}

impl GenStats {
    pub fn render(&self, cohort: &Cohort) -> String {
        let n = cohort.records.len().max(1);
        let mut s = String::new();
        let _ = writeln!(s, "records={}", cohort.records.len());
        let _ = writeln!(s, "cases={}", cohort.count(Label::Case));
        let _ = writeln!(s, "controls={}", cohort.count(Label::Control));
        let _ = writeln!(s, "dropped_short={}", self.dropped_short);
        let _ = writeln!(s, "truncated_long={}", self.truncated_long);
        let _ = writeln!(s, "len_mean={:.2}", self.len_sum as f64 / n as f64);
        let _ = writeln!(s, "len_min={}", self.len_min);
        let _ = writeln!(s, "len_max={}", self.len_max);
        for (k, (ca, co)) in self.cluster_activations.iter().enumerate() {
            let _ = writeln!(s, "cluster{k}_activations case={ca} control={co}");
        }
        s
    }
}

/// Generate a cohort: one independent stream per patient, stratified
/// 7:1:2 split, lengths in `[MIN_LEN, MAX_LEN]` by construction.
pub fn generate_cohort(spec: &CohortSpec) -> Result<(Cohort, GenStats)> {
    spec.validate()?;
    let total = (spec.cases + spec.controls) as usize;
    let gamma = Gamma::new(spec.length_shape, spec.length_scale).unwrap();
    let k = spec.clusters as usize;
    let sig = spec.signature_clusters as usize;
    let mut stats = GenStats {
        len_min: usize::MAX,
        cluster_activations: vec![(0, 0); k],
        ..GenStats::default()
    };
    let mut records = Vec::with_capacity(total);
    let cluster_pool: Vec<Vec<u32>> = (0..spec.clusters).map(|c| spec.cluster_codes(c)).collect();

    for pid in 0..total as u64 {
        let label = if pid < spec.cases as u64 { Label::Case } else { Label::Control };
        let mut r = rng::substream_indexed(spec.seed, "cohort.patient", pid);

        let (rm, rs) = match label {
            Label::Case => (spec.case_risk_mean, spec.case_risk_sd),
            Label::Control => (spec.control_risk_mean, spec.control_risk_sd),
        };
        let risk = if rs > 0.0 {
            Normal::new(rm, rs).unwrap().sample(&mut r).clamp(0.02, 0.98)
        } else {
            rm.clamp(0.02, 0.98)
        };

        let mut active: Vec<usize> = Vec::new();
        for c in 0..k {
            let p = if c < sig { risk } else { spec.base_cluster_rate };
            if r.random::<f64>() < p {
                active.push(c);
            }
        }
        if active.is_empty() {
            // guarantee a pool; pick a deterministic non-signature cluster
            active.push(sig + (pid as usize % (k - sig)));
        }
        for &c in &active {
            match label {
                Label::Case => stats.cluster_activations[c].0 += 1,
                Label::Control => stats.cluster_activations[c].1 += 1,
            }
        }

        let mut pool: Vec<u32> = Vec::new();
        for &c in &active {
            for &code in &cluster_pool[c] {
                if r.random::<f64>() < spec.co_draw {
                    pool.push(code);
                }
            }
        }

        let len = loop {
            let l = gamma.sample(&mut r);
            if (MIN_LEN as f64..MAX_LEN as f64 + 1.0).contains(&l) {
                break l as usize;
            }
        };
        let n_windows = r.random_range(spec.windows_min..=spec.windows_max);

        let mut events = Vec::with_capacity(len);
        for _ in 0..len {
            let code = if pool.is_empty() || r.random::<f64>() < spec.noise_rate {
                r.random_range(0..spec.vocab_size)
            } else {
                pool[r.random_range(0..pool.len())]
            };
            let window = r.random_range(0..n_windows);
            events.push(Event { window, code });
        }
        let events = match clamp_and_order(events) {
            Clamped::Kept { events, truncated } => {
                if truncated {
                    stats.truncated_long += 1;
                }
                events
            }
            Clamped::DroppedShort => {
                stats.dropped_short += 1;
                continue;
            }
        };
        stats.len_sum += events.len() as u64;
        stats.len_min = stats.len_min.min(events.len());
        stats.len_max = stats.len_max.max(events.len());
        records.push(PatientRecord { id: pid, label, events });
    }

    let splits = assign_splits(&records, spec.seed);
    let cohort = Cohort {
        records,
        splits,
        vocab: Vocabulary::new(spec.vocab_size),
        spec_hash: spec.hash(),
        seed: spec.seed,
    };
    Ok((cohort, stats))
}

/// Stratified 7:1:2 split: within each class, shuffle then cut by largest
/// remainder, so per-class counts are within one record of exact fractions.
fn assign_splits(records: &[PatientRecord], seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Train; records.len()];
    let mut r = rng::substream(seed, "cohort.split");
    for label in [Label::Case, Label::Control] {
        let mut idx: Vec<usize> =
            (0..records.len()).filter(|&i| records[i].label == label).collect();
        // Fisher-Yates
        for i in (1..idx.len()).rev() {
            let j = r.random_range(0..=i);
            idx.swap(i, j);
        }
        let n = idx.len();
        let counts = largest_remainder(n, &[0.7, 0.1, 0.2]);
        let mut cursor = 0;
        for (part, &count) in [Split::Train, Split::Val, Split::Test].iter().zip(&counts) {
            for &i in &idx[cursor..cursor + count] {
                splits[i] = *part;
            }
            cursor += count;
        }
    }
    splits
}

/// Integer apportionment of `n` by `fractions` (sums to n exactly).
pub(crate) fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&x| x.floor() as usize).collect();
    let mut short = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    counts
}

const CORPUS_MAGIC: &str = "#ehr-corpus v1";

/// Write a cohort in the canonical text format: header lines, then records
/// grouped train/val/test and ordered by patient id within each group.
pub fn save_corpus(path: &Path, cohort: &Cohort) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{CORPUS_MAGIC} vocab={} spec={} seed={} code={}",
        cohort.vocab.size(),
        cohort.spec_hash,
        cohort.seed,
        env!("CARGO_PKG_VERSION"),
    );
    let counts: Vec<usize> =
        [Split::Train, Split::Val, Split::Test].iter().map(|&p| cohort.indices_in(p).len()).collect();
    let _ = writeln!(s, "#split train={} val={} test={}", counts[0], counts[1], counts[2]);
    for part in [Split::Train, Split::Val, Split::Test] {
        let mut idx = cohort.indices_in(part);
        idx.sort_by_key(|&i| cohort.records[i].id);
        for i in idx {
            let rec = &cohort.records[i];
            let label = match rec.label {
                Label::Case => "case",
                Label::Control => "control",
            };
            let _ = write!(s, "{}\t{}\t", rec.id, label);
            for (j, e) in rec.events.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{}:{}", e.window, e.code);
            }
            s.push('\n');
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Cohort> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Corpus { line: 1, msg: "empty file".into() })?;
    if !header.starts_with(CORPUS_MAGIC) {
        return Err(Error::Corpus {
            line: 1,
            msg: format!("missing `{CORPUS_MAGIC}` header (got `{header}`)"),
        });
    }
    let head = parse_kv_header(header);
    let vocab_size: u32 = head
        .get("vocab")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Corpus { line: 1, msg: "header lacks vocab=N".into() })?;
    let spec_hash = head.get("spec").cloned().unwrap_or_else(|| "external".into());
    let seed: u64 = head.get("seed").and_then(|v| v.parse().ok()).unwrap_or(0);

    let (_, split_line) = lines
        .next()
        .ok_or_else(|| Error::Corpus { line: 2, msg: "missing #split line".into() })?;
    if !split_line.starts_with("#split") {
        return Err(Error::Corpus { line: 2, msg: "second line must be #split".into() });
    }
    let sh = parse_kv_header(split_line);
    let want: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|k| {
            sh.get(*k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Corpus { line: 2, msg: format!("#split lacks {k}=N") })
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut splits = Vec::new();
    for (lno, line) in lines {
        let line_no = lno + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id: u64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Corpus { line: line_no, msg: "bad patient id".into() })?;
        let label = match fields.next() {
            Some("case") => Label::Case,
            Some("control") => Label::Control,
            other => {
                return Err(Error::Corpus {
                    line: line_no,
                    msg: format!("label must be case|control, got {other:?}"),
                })
            }
        };
        let ev_field = fields
            .next()
            .ok_or_else(|| Error::Corpus { line: line_no, msg: "missing events field".into() })?;
        if fields.next().is_some() {
            return Err(Error::Corpus { line: line_no, msg: "too many tab fields".into() });
        }
        let mut events = Vec::new();
        let mut last_window = 0u16;
        for part in ev_field.split(',') {
            let (w, c) = part.split_once(':').ok_or_else(|| Error::Corpus {
                line: line_no,
                msg: format!("event `{part}` is not window:code"),
            })?;
            let window: u16 = w.parse().map_err(|_| Error::Corpus {
                line: line_no,
                msg: format!("bad window `{w}`"),
            })?;
            let code: u32 = c.parse().map_err(|_| Error::Corpus {
                line: line_no,
                msg: format!("bad code `{c}`"),
            })?;
            if code >= vocab_size {
                return Err(Error::Corpus {
                    line: line_no,
                    msg: format!("code {code} outside vocabulary of {vocab_size}"),
                });
            }
            if window < last_window {
                return Err(Error::Corpus {
                    line: line_no,
                    msg: format!("windows must be non-decreasing ({last_window} then {window})"),
                });
            }
            last_window = window;
            events.push(Event { window, code });
        }
        if events.is_empty() {
            return Err(Error::Corpus { line: line_no, msg: "record with no events".into() });
        }
        let part_index = splits.len();
        let split = if part_index < want[0] {
            Split::Train
        } else if part_index < want[0] + want[1] {
            Split::Val
        } else {
            Split::Test
        };
        records.push(PatientRecord { id, label, events });
        splits.push(split);
    }
    let total: usize = want.iter().sum();
    if records.len() != total {
        return Err(Error::Corpus {
            line: 2,
            msg: format!("#split says {total} records, file has {}", records.len()),
        });
    }
    // restore canonical id order (the file is grouped by split)
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| records[i].id);
    for pair in order.windows(2) {
        if records[pair[0]].id == records[pair[1]].id {
            return Err(Error::Corpus {
                line: 2,
                msg: format!("duplicate patient id {}", records[pair[0]].id),
            });
        }
    }
    let splits = order.iter().map(|&i| splits[i]).collect();
    let records = {
        let mut by_id: Vec<Option<PatientRecord>> = records.into_iter().map(Some).collect();
        order.iter().map(|&i| by_id[i].take().expect("order is a permutation")).collect()
    };
    Ok(Cohort {
        records,
        splits,
        vocab: Vocabulary::new(vocab_size),
        spec_hash,
        seed,
    })
}

fn parse_kv_header(line: &str) -> BTreeMap<String, String> {
    line.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> CohortSpec {
        CohortSpec { cases: 40, controls: 80, vocab_size: 300, seed: 5, ..CohortSpec::default() }
    }

    #[test]
    fn default_spec_is_valid_and_generation_is_deterministic() {
        let spec = tiny_spec();
        let (a, _) = generate_cohort(&spec).unwrap();
        let (b, _) = generate_cohort(&spec).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.splits, b.splits);
        assert_eq!(a.records.len(), 120);
        assert_eq!(a.count(Label::Case), 40);
    }

    #[test]
    fn lengths_and_windows_respect_bounds() {
        let (cohort, stats) = generate_cohort(&tiny_spec()).unwrap();
        for rec in &cohort.records {
            assert!(rec.events.len() >= MIN_LEN && rec.events.len() <= MAX_LEN);
            for pair in rec.events.windows(2) {
                assert!(pair[0].window <= pair[1].window);
            }
        }
        assert_eq!(stats.dropped_short, 0);
    }

    #[test]
    fn split_is_stratified_7_1_2() {
        let (cohort, _) = generate_cohort(&tiny_spec()).unwrap();
        for label in [Label::Case, Label::Control] {
            let n = cohort.count(label);
            let count = |p: Split| {
                cohort
                    .records
                    .iter()
                    .zip(&cohort.splits)
                    .filter(|(r, &s)| r.label == label && s == p)
                    .count() as f64
            };
            assert!((count(Split::Train) - 0.7 * n as f64).abs() <= 1.0);
            assert!((count(Split::Val) - 0.1 * n as f64).abs() <= 1.0);
            assert!((count(Split::Test) - 0.2 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn clamp_truncates_to_most_recent_and_drops_short() {
        let mk = |n: usize| -> Vec<Event> {
            (0..n).map(|i| Event { window: (n - 1 - i) as u16, code: i as u32 }).collect()
        };
        match clamp_and_order(mk(300)) {
            Clamped::Kept { events, truncated } => {
                assert!(truncated);
                assert_eq!(events.len(), MAX_LEN);
                // most recent events have the highest windows
                assert_eq!(events.last().unwrap().window, 299);
                assert_eq!(events[0].window, 50);
            }
            _ => panic!("should keep"),
        }
        assert_eq!(clamp_and_order(mk(49)), Clamped::DroppedShort);
        // sorting is stable within a window
        let mixed = vec![
            Event { window: 2, code: 9 },
            Event { window: 1, code: 7 },
            Event { window: 2, code: 8 },
        ];
        if let Clamped::Kept { events, .. } =
            clamp_and_order([mixed.clone(), mk(60)].concat())
        {
            let in_two: Vec<u32> = events
                .iter()
                .filter(|e| e.window == 2 && (e.code == 8 || e.code == 9))
                .map(|e| e.code)
                .collect();
            assert_eq!(in_two, vec![9, 8]);
        } else {
            panic!("should keep");
        }
    }

    #[test]
    fn infeasible_length_model_rejected() {
        let spec = CohortSpec { length_shape: 2.0, length_scale: 1.0, ..tiny_spec() };
        assert!(matches!(spec.validate(), Err(Error::Invalid(_))));
        let spec2 = CohortSpec { length_shape: 500.0, length_scale: 5.0, ..tiny_spec() };
        assert!(spec2.validate().is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(CohortSpec { clusters: 100, cluster_size: 100, vocab_size: 50, ..tiny_spec() }
            .validate()
            .is_err());
        assert!(CohortSpec { signature_clusters: 24, ..tiny_spec() }.validate().is_err());
        assert!(CohortSpec { noise_rate: 1.5, ..tiny_spec() }.validate().is_err());
        assert!(CohortSpec { cases: 0, ..tiny_spec() }.validate().is_err());
    }

    #[test]
    fn corpus_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("c1.corpus");
        let p2 = dir.path().join("c2.corpus");
        let (cohort, _) = generate_cohort(&tiny_spec()).unwrap();
        save_corpus(&p1, &cohort).unwrap();
        let loaded = load_corpus(&p1).unwrap();
        save_corpus(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.vocab.size(), cohort.vocab.size());
        assert_eq!(loaded.records.len(), cohort.records.len());
    }

    #[test]
    fn corpus_parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.corpus");
        let write = |body: &str| {
            std::fs::write(
                &p,
                format!("#ehr-corpus v1 vocab=10 spec=x seed=0 code=0\n#split train=1 val=0 test=0\n{body}"),
            )
            .unwrap()
        };
        write("0\tcase\t0:3,0:99");
        match load_corpus(&p) {
            Err(Error::Corpus { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("outside vocabulary"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        write("0\tcase\t2:3,1:4");
        assert!(matches!(load_corpus(&p), Err(Error::Corpus { line: 3, .. })));
        write("0\tmaybe\t0:3");
        assert!(load_corpus(&p).is_err());
        std::fs::write(&p, "not a corpus\n").unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::Corpus { line: 1, .. })));
    }

    #[test]
    fn largest_remainder_sums_exactly() {
        for n in [1usize, 7, 10, 29, 3000] {
            let c = largest_remainder(n, &[0.7, 0.1, 0.2]);
            assert_eq!(c.iter().sum::<usize>(), n);
        }
        assert_eq!(largest_remainder(10, &[0.7, 0.1, 0.2]), vec![7, 1, 2]);
    }

    #[test]
    fn signature_clusters_separate_classes() {
        let (cohort, stats) = generate_cohort(&tiny_spec()).unwrap();
        let spec = tiny_spec();
        let sig = spec.signature_clusters as usize;
        let n_case = cohort.count(Label::Case) as f64;
        let n_ctrl = cohort.count(Label::Control) as f64;
        for (k, (ca, co)) in stats.cluster_activations.iter().enumerate() {
            let (ra, rc) = (*ca as f64 / n_case, *co as f64 / n_ctrl);
            if k < sig {
                assert!(ra > rc + 0.1, "signature cluster {k}: case {ra:.2} vs control {rc:.2}");
            }
        }
    }
}
