//! Metrics: AUROC (exact rank statistic), accuracy, distribution-fidelity
//! report between a real and generated corpus, a logistic probe for cohort
//! calibration, and aggregation of repeated runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synth::{Cohort, Label, PatientRecord, Split, MAX_LEN, MIN_LEN};
use crate::tensor::layers;

/// Area under the ROC curve by the rank statistic: ties count one half.
///
/// Internally counts half-pairs in integers and performs a single final
/// division, so the result is *bitwise* equal to the naive all-pairs
/// computation done the same way.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "auroc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auroc: NaN score has no rank"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auroc: needs at least one positive and one negative"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut half_pairs: u128 = 0; // 2*win + tie per (pos, neg) pair
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut pos_here: u128 = 0;
        let mut neg_here: u128 = 0;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        half_pairs += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
        i = j;
    }
    Ok(half_pairs as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// Classification accuracy at the 0.5 threshold (ties predict negative).
pub fn accuracy(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid("accuracy: empty or mismatched inputs"));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s > 0.5) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Average-rank Spearman correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("spearman: needs two equal-length vectors of >= 2"));
    }
    pearson(&ranks(a), &ranks(b))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &k in &idx[i..j] {
            out[k] = avg;
        }
        i = j;
    }
    out
}

/// Pearson correlation; zero-variance input yields 0 (maximally uninformative).
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("pearson: needs two equal-length vectors of >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Length histogram: width-10 bins covering `[MIN_LEN, MAX_LEN]` plus an
/// underflow and an overflow bin (generated records can run short).
pub fn length_histogram(lens: impl Iterator<Item = usize>) -> Vec<f64> {
    let bins = (MAX_LEN - MIN_LEN) / 10; // 20 regular bins
    let mut h = vec![0.0; bins + 2];
    let mut n = 0u64;
    for l in lens {
        let slot = if l < MIN_LEN {
            0
        } else if l > MAX_LEN {
            bins + 1
        } else {
            1 + ((l - MIN_LEN) / 10).min(bins - 1)
        };
        h[slot] += 1.0;
        n += 1;
    }
    if n > 0 {
        for v in &mut h {
            *v /= n as f64;
        }
    }
    h
}

/// Total variation distance between two normalized histograms.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub n_real: usize,
    pub n_gen: usize,
    /// TV distance between length histograms.
    pub len_tv: f64,
    pub len_hist_real: Vec<f64>,
    pub len_hist_gen: Vec<f64>,
    /// The k most frequent codes of the real corpus, by occurrence count.
    pub top_codes: Vec<u32>,
    /// Spearman correlation of occurrence frequencies over `top_codes`.
    pub freq_spearman: f64,
    /// Pearson correlation of record-level co-presence rates over all
    /// unordered pairs of `top_codes`.
    pub cooc_pearson: f64,
}

fn code_counts(records: &[&PatientRecord]) -> BTreeMap<u32, u64> {
    let mut m = BTreeMap::new();
    for r in records {
        for e in &r.events {
            *m.entry(e.code).or_insert(0) += 1;
        }
    }
    m
}

/// Co-presence rate matrix over `codes`: fraction of records containing both
/// codes, flattened to the upper triangle (i < j).
fn copresence(records: &[&PatientRecord], codes: &[u32]) -> Vec<f64> {
    let k = codes.len();
    let code_slot: BTreeMap<u32, usize> =
        codes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut counts = vec![0u64; k * k];
    for r in records {
        let present: BTreeSet<usize> =
            r.events.iter().filter_map(|e| code_slot.get(&e.code).copied()).collect();
        let p: Vec<usize> = present.into_iter().collect();
        for (a, &i) in p.iter().enumerate() {
            for &j in &p[a + 1..] {
                counts[i * k + j] += 1;
            }
        }
    }
    let n = records.len().max(1) as f64;
    let mut out = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            out.push(counts[i * k + j] as f64 / n);
        }
    }
    out
}

/// Distribution fidelity of a generated corpus against the real one it
/// imitates: length TV, top-k frequency Spearman, top-k co-presence Pearson.
pub fn fidelity(
    real: &[&PatientRecord],
    generated: &[&PatientRecord],
    k: usize,
) -> Result<FidelityReport> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::invalid("fidelity: both record sets must be non-empty"));
    }
    if k < 2 {
        return Err(Error::invalid("fidelity: k must be >= 2"));
    }
    let len_hist_real = length_histogram(real.iter().map(|r| r.events.len()));
    let len_hist_gen = length_histogram(generated.iter().map(|r| r.events.len()));
    let len_tv = total_variation(&len_hist_real, &len_hist_gen);

    let real_counts = code_counts(real);
    let gen_counts = code_counts(generated);
    let mut by_freq: Vec<(u32, u64)> = real_counts.iter().map(|(&c, &n)| (c, n)).collect();
    // ties break toward the smaller code id for determinism
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let top_codes: Vec<u32> = by_freq.iter().take(k).map(|&(c, _)| c).collect();
    if top_codes.len() < k {
        return Err(Error::invalid(format!(
            "fidelity: real corpus has only {} distinct codes, k={k}",
            top_codes.len()
        )));
    }
    let freq_real: Vec<f64> =
        top_codes.iter().map(|c| real_counts[c] as f64).collect();
    let freq_gen: Vec<f64> = top_codes
        .iter()
        .map(|c| gen_counts.get(c).copied().unwrap_or(0) as f64)
        .collect();
    let freq_spearman = spearman(&freq_real, &freq_gen)?;

    let cooc_real = copresence(real, &top_codes);
    let cooc_gen = copresence(generated, &top_codes);
    let cooc_pearson = pearson(&cooc_real, &cooc_gen)?;

    Ok(FidelityReport {
        n_real: real.len(),
        n_gen: generated.len(),
        len_tv,
        len_hist_real,
        len_hist_gen,
        top_codes,
        freq_spearman,
        cooc_pearson,
    })
}

impl FidelityReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fidelity: {} real vs {} generated records", self.n_real, self.n_gen);
        let _ = writeln!(s, "  length TV distance   {:.4}", self.len_tv);
        let _ = writeln!(s, "  top-{} freq Spearman  {:.4}", self.top_codes.len(), self.freq_spearman);
        let _ = writeln!(s, "  top-{} cooc Pearson   {:.4}", self.top_codes.len(), self.cooc_pearson);
        s
    }
}

/// One training/evaluation run to be aggregated with its repeats.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub group: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricAgg {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub metrics: BTreeMap<String, MetricAgg>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Group runs by `group` and aggregate each metric (median/min/max).
pub fn compare_runs(runs: &[RunSummary]) -> Vec<GroupSummary> {
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for run in runs {
        let g = grouped.entry(run.group.clone()).or_default();
        for (k, &v) in &run.metrics {
            g.entry(k.clone()).or_default().push(v);
        }
    }
    grouped
        .into_iter()
        .map(|(group, metrics)| GroupSummary {
            group,
            metrics: metrics
                .into_iter()
                .map(|(k, vs)| {
                    let agg = MetricAgg {
                        median: median(&vs),
                        min: vs.iter().cloned().fold(f64::INFINITY, f64::min),
                        max: vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                        n: vs.len(),
                    };
                    (k, agg)
                })
                .collect(),
        })
        .collect()
}

/// Aligned-text table of group summaries (groups as rows).
pub fn render_groups(groups: &[GroupSummary]) -> String {
    let mut cols: Vec<String> = Vec::new();
    for g in groups {
        for k in g.metrics.keys() {
            if !cols.contains(k) {
                cols.push(k.clone());
            }
        }
    }
    let mut s = String::new();
    let gw = groups.iter().map(|g| g.group.len()).max().unwrap_or(5).max(5);
    let _ = write!(s, "{:<gw$}  n ", "group");
    for c in &cols {
        let _ = write!(s, " {:>22}", format!("{c} (med/min/max)"));
    }
    s.push('\n');
    for g in groups {
        let n = g.metrics.values().map(|m| m.n).max().unwrap_or(0);
        let _ = write!(s, "{:<gw$}  {:<2}", g.group, n);
        for c in &cols {
            match g.metrics.get(c) {
                Some(m) => {
                    let _ =
                        write!(s, " {:>22}", format!("{:.4}/{:.4}/{:.4}", m.median, m.min, m.max));
                }
                None => {
                    let _ = write!(s, " {:>22}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Runs serialized as line-delimited JSON.
pub fn runs_to_jsonl(runs: &[RunSummary]) -> String {
    runs.iter()
        .map(|r| serde_json::to_string(r).expect("run summaries are plain data"))
        .fold(String::new(), |mut acc, line| {
            acc.push_str(&line);
            acc.push('\n');
            acc
        })
}

/// Logistic regression on binary code-presence features, trained on the
/// train split and scored on the test split. Used to calibrate how much
/// class signal a cohort spec carries, independent of the CNN stack.
pub fn logistic_probe_auroc(cohort: &Cohort, iters: usize, lr: f64) -> Result<f64> {
    let v = cohort.vocab.size() as usize;
    let features = |records: &[&PatientRecord]| -> (Vec<f64>, Vec<bool>) {
        let mut x = vec![0.0; records.len() * v];
        let mut y = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            for e in &r.events {
                x[i * v + e.code as usize] = 1.0;
            }
            // unit-norm rows keep plain gradient descent stable at lr ~ 1
            let norm = x[i * v..(i + 1) * v].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                for a in &mut x[i * v..(i + 1) * v] {
                    *a /= norm;
                }
            }
            y.push(r.label == Label::Case);
        }
        (x, y)
    };
    let train = cohort.records_in(Split::Train);
    let test = cohort.records_in(Split::Test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("logistic probe: empty train or test split"));
    }
    let (xt, yt) = features(&train);
    let n = train.len();
    let mut w = vec![0.0f64; v];
    let mut b = 0.0f64;
    let mut p = vec![0.0f64; n];
    let mut grad_w = vec![0.0f64; v];
    for _ in 0..iters {
        // p = sigmoid(X w + b)
        layers::gemm(n, v, 1, &xt, v as isize, 1, &w, 1, 1, 0.0, &mut p);
        for pi in &mut p {
            *pi = 1.0 / (1.0 + (-(*pi + b)).exp());
        }
        let resid: Vec<f64> = p
            .iter()
            .zip(&yt)
            .map(|(&pi, &yi)| (pi - if yi { 1.0 } else { 0.0 }) / n as f64)
            .collect();
        // grad_w = X^T resid  (+ small L2)
        layers::gemm(v, n, 1, &xt, 1, v as isize, &resid, 1, 1, 0.0, &mut grad_w);
        for (wi, g) in w.iter_mut().zip(&grad_w) {
            *wi -= lr * (g + 1e-4 * *wi / n as f64);
        }
        b -= lr * resid.iter().sum::<f64>();
    }
    let (xs, ys) = features(&test);
    let mut scores = vec![0.0f64; test.len()];
    layers::gemm(test.len(), v, 1, &xs, v as isize, 1, &w, 1, 1, 0.0, &mut scores);
    for s in &mut scores {
        *s += b;
    }
    auroc(&scores, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// The quadratic-time oracle, written to share the final division.
    pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut half: u128 = 0;
        let mut n_pos: u128 = 0;
        for (&si, &li) in scores.iter().zip(labels) {
            if !li {
                continue;
            }
            n_pos += 1;
            for (&sj, &lj) in scores.iter().zip(labels) {
                if lj {
                    continue;
                }
                if si > sj {
                    half += 2;
                } else if si == sj {
                    half += 1;
                }
            }
        }
        let n_neg = labels.iter().filter(|&&l| !l).count() as u128;
        half as f64 / (2 * n_pos * n_neg) as f64
    }

    #[test]
    fn auroc_known_values() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(auroc(&s, &l).unwrap(), 0.75);
        // all tied: exactly one half
        assert_eq!(auroc(&[1.0; 6], &[true, false, true, false, false, false]).unwrap(), 0.5);
        // perfect and inverted
        assert_eq!(auroc(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[4.0, 3.0, 2.0, 1.0], &[false, false, true, true]).unwrap(), 0.0);
    }

    #[test]
    fn auroc_matches_pair_oracle_exactly_with_ties() {
        let mut rng = crate::rng::substream(31, "test.auroc");
        for _ in 0..50 {
            let n = rng.random_range(2..60);
            // coarse grid forces plenty of exact ties
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random_range(0..8) as f64) / 4.0 - 0.7).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
            labels[0] = true;
            if n > 1 {
                labels[1] = false;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_pairs(&scores, &labels);
            assert!(fast == slow, "bitwise mismatch: {fast} vs {slow}");
        }
    }

    #[test]
    fn auroc_invariant_under_strictly_increasing_transform() {
        let mut rng = crate::rng::substream(32, "test.auroc.mono");
        let scores: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let base = auroc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let cube: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s).collect();
        assert_eq!(auroc(&exp, &labels).unwrap(), base);
        assert_eq!(auroc(&cube, &labels).unwrap(), base);
    }

    #[test]
    fn auroc_degenerate_inputs_rejected() {
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1, f64::NAN], &[true, false]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn spearman_and_pearson_hand_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, -1.0, -7.0]).unwrap(), -1.0);
        // monotone but nonlinear: rho = 1, r < 1
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 10.0, 100.0, 1000.0];
        assert_eq!(spearman(&a, &b).unwrap(), 1.0);
        assert!(pearson(&a, &b).unwrap() < 1.0);
        assert_eq!(pearson(&a, &[2.0, 2.0, 2.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 30.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn length_histogram_bins() {
        let h = length_histogram([49usize, 50, 59, 60, 249, 250, 251].into_iter());
        assert_eq!(h.len(), 22);
        assert_eq!(h[0], 1.0 / 7.0); // underflow: 49
        assert_eq!(h[1], 2.0 / 7.0); // [50,60): 50, 59
        assert_eq!(h[2], 1.0 / 7.0); // [60,70): 60
        assert_eq!(h[20], 2.0 / 7.0); // [240,250]: 249, 250
        assert_eq!(h[21], 1.0 / 7.0); // overflow: 251
    }

    #[test]
    fn fidelity_self_comparison_is_perfect() {
        let (cohort, _) = crate::synth::generate_cohort(&crate::synth::CohortSpec {
            cases: 40,
            controls: 40,
            vocab_size: 300,
            seed: 6,
            ..crate::synth::CohortSpec::default()
        })
        .unwrap();
        let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let rep = fidelity(&recs, &recs, 20).unwrap();
        assert_eq!(rep.len_tv, 0.0);
        assert_eq!(rep.freq_spearman, 1.0);
        assert!((rep.cooc_pearson - 1.0).abs() < 1e-12);
        assert_eq!(rep.top_codes.len(), 20);
    }

    #[test]
    fn compare_runs_aggregates_medians() {
        let mk = |group: &str, seed: u64, v: f64| RunSummary {
            group: group.into(),
            seed,
            metrics: [("auroc".to_string(), v)].into_iter().collect(),
        };
        let groups = compare_runs(&[
            mk("a", 0, 0.8),
            mk("a", 1, 0.9),
            mk("a", 2, 0.7),
            mk("b", 0, 0.6),
            mk("b", 1, 0.65),
        ]);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].metrics["auroc"].median, 0.8);
        assert_eq!(groups[0].metrics["auroc"].min, 0.7);
        assert_eq!(groups[1].metrics["auroc"].median, 0.625);
        let table = render_groups(&groups);
        assert!(table.contains("auroc"));
        let jsonl = runs_to_jsonl(&[mk("a", 0, 0.8)]);
        assert!(jsonl.trim().starts_with('{') && jsonl.contains("\"auroc\":0.8"));
    }

    #[test]
    fn logistic_probe_separates_default_style_cohort() {
        let (cohort, _) = crate::synth::generate_cohort(&crate::synth::CohortSpec {
            cases: 150,
            controls: 300,
            vocab_size: 400,
            seed: 8,
            ..crate::synth::CohortSpec::default()
        })
        .unwrap();
        let a = logistic_probe_auroc(&cohort, 800, 2.0).unwrap();
        assert!(a > 0.7 && a < 1.0, "probe auroc {a}");
    }
}
