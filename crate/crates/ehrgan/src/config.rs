//! Flat key=value run configuration with section prefixes.
//!
//! One text format drives every subcommand: `section.key = value`, one per
//! line, `#` comments, no nesting. Unknown or duplicate keys are rejected
//! with their line number. `echo()` renders the fully resolved
//! configuration (defaults included) in a canonical order; its SHA-256 is
//! the config hash stamped into artifacts, so two runs agree on provenance
//! iff their resolved configurations are byte-identical.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::embedding::EmbedConfig;
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::predictor::{PredictorConfig, SslConfig, TrainMode};
use crate::synth::CohortSpec;

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Top-k codes for frequency/co-occurrence fidelity.
    pub top_k: usize,
    /// Generated corpus size for fidelity runs; 0 means match the source
    /// record count.
    pub gen_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { top_k: 20, gen_count: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// Adversarial-weight grid for the rho sweep.
    pub rho_grid: Vec<f64>,
    /// Augmentation-weight grid for the mu sweep.
    pub mu_grid: Vec<f64>,
    /// Seeds per grid cell; cell seeds are root_seed..root_seed+seeds.
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rho_grid: vec![0.0, 0.001, 0.01, 0.1, 0.2, 1.0],
            mu_grid: vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4],
            seeds: 5,
        }
    }
}

/// Input artifact overrides; unset entries resolve to conventional names
/// under the output directory.
#[derive(Debug, Clone, Default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub embedding: Option<PathBuf>,
    pub gan_case: Option<PathBuf>,
    pub gan_control: Option<PathBuf>,
    pub predictor: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Root seed; every stage derives named substreams from it.
    pub seed: u64,
    pub cohort: CohortSpec,
    pub embedding: EmbedConfig,
    pub gan: GanConfig,
    pub predictor: PredictorConfig,
    pub ssl: SslConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            cohort: CohortSpec::default(),
            embedding: EmbedConfig::default(),
            gan: GanConfig::default(),
            predictor: PredictorConfig::default(),
            ssl: SslConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn num<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(v: &str, line: usize, key: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(line, format!("`{key}`: want true|false, got `{v}`"))),
    }
}

fn num_list<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .map(|t| t.parse().map_err(|_| bad(line, format!("`{key}`: cannot parse `{t}`"))))
        .collect()
}

fn render_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    /// Defaults overlaid with the given lines, then cross-field resolution
    /// and validation.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| bad(line, format!("expected key = value, got `{body}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(line, format!("duplicate key `{key}`")));
            }
            cfg.apply(key, value, line)?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        match key {
            "seed" => self.seed = num(v, line, key)?,

            "cohort.vocab_size" => self.cohort.vocab_size = num(v, line, key)?,
            "cohort.clusters" => self.cohort.clusters = num(v, line, key)?,
            "cohort.cluster_size" => self.cohort.cluster_size = num(v, line, key)?,
            "cohort.signature_clusters" => self.cohort.signature_clusters = num(v, line, key)?,
            "cohort.co_draw" => self.cohort.co_draw = num(v, line, key)?,
            "cohort.base_cluster_rate" => self.cohort.base_cluster_rate = num(v, line, key)?,
            "cohort.case_risk_mean" => self.cohort.case_risk_mean = num(v, line, key)?,
            "cohort.case_risk_sd" => self.cohort.case_risk_sd = num(v, line, key)?,
            "cohort.control_risk_mean" => self.cohort.control_risk_mean = num(v, line, key)?,
            "cohort.control_risk_sd" => self.cohort.control_risk_sd = num(v, line, key)?,
            "cohort.noise_rate" => self.cohort.noise_rate = num(v, line, key)?,
            "cohort.cases" => self.cohort.cases = num(v, line, key)?,
            "cohort.controls" => self.cohort.controls = num(v, line, key)?,
            "cohort.length_shape" => self.cohort.length_shape = num(v, line, key)?,
            "cohort.length_scale" => self.cohort.length_scale = num(v, line, key)?,
            "cohort.windows_min" => self.cohort.windows_min = num(v, line, key)?,
            "cohort.windows_max" => self.cohort.windows_max = num(v, line, key)?,

            "embedding.dim" => self.embedding.dim = num(v, line, key)?,
            "embedding.window" => self.embedding.window = num(v, line, key)?,
            "embedding.negatives" => self.embedding.negatives = num(v, line, key)?,
            "embedding.epochs" => self.embedding.epochs = num(v, line, key)?,
            "embedding.lr" => self.embedding.lr = num(v, line, key)?,

            "gan.rho" => self.gan.rho = num(v, line, key)?,
            "gan.inner_steps" => self.gan.inner_steps = num(v, line, key)?,
            "gan.latent" => self.gan.latent = num(v, line, key)?,
            "gan.mask_p" => self.gan.mask_p = num(v, line, key)?,
            "gan.seq_rows" => self.gan.seq_rows = num(v, line, key)?,
            "gan.widths" => self.gan.widths = num_list(v, line, key)?,
            "gan.maps" => self.gan.maps = num(v, line, key)?,
            "gan.smooth" => self.gan.smooth = num(v, line, key)?,
            "gan.batch_norm" => self.gan.batch_norm = boolean(v, line, key)?,
            "gan.batch" => self.gan.batch = num(v, line, key)?,
            "gan.max_iterations" => self.gan.max_iterations = num(v, line, key)?,
            "gan.converge_window" => self.gan.converge_window = num(v, line, key)?,
            "gan.converge_tol" => self.gan.converge_tol = num(v, line, key)?,
            "gan.lr" => self.gan.optim.lr = num(v, line, key)?,
            "gan.clip" => self.gan.optim.clip = num(v, line, key)?,
            "gan.l2" => self.gan.optim.l2 = num(v, line, key)?,

            "predictor.widths" => self.predictor.widths = num_list(v, line, key)?,
            "predictor.maps" => self.predictor.maps = num(v, line, key)?,
            "predictor.lr" => self.predictor.optim.lr = num(v, line, key)?,
            "predictor.clip" => self.predictor.optim.clip = num(v, line, key)?,
            "predictor.mode" => {
                self.ssl.mode = TrainMode::parse(v).map_err(|e| bad(line, e.to_string()))?
            }
            "predictor.mu" => self.ssl.mu = num(v, line, key)?,
            "predictor.a" => self.ssl.a = num(v, line, key)?,
            "predictor.labeled_fraction" => self.ssl.labeled_fraction = num(v, line, key)?,
            "predictor.resample_per_epoch" => {
                self.ssl.resample_per_epoch = boolean(v, line, key)?
            }
            "predictor.batch" => self.ssl.batch = num(v, line, key)?,
            "predictor.max_epochs" => self.ssl.max_epochs = num(v, line, key)?,
            "predictor.patience" => self.ssl.patience = num(v, line, key)?,

            "eval.top_k" => self.eval.top_k = num(v, line, key)?,
            "eval.gen_count" => self.eval.gen_count = num(v, line, key)?,

            "sweep.rho_grid" => self.sweep.rho_grid = num_list(v, line, key)?,
            "sweep.mu_grid" => self.sweep.mu_grid = num_list(v, line, key)?,
            "sweep.seeds" => self.sweep.seeds = num(v, line, key)?,

            "paths.corpus" => self.paths.corpus = Some(PathBuf::from(v)),
            "paths.embedding" => self.paths.embedding = Some(PathBuf::from(v)),
            "paths.gan_case" => self.paths.gan_case = Some(PathBuf::from(v)),
            "paths.gan_control" => self.paths.gan_control = Some(PathBuf::from(v)),
            "paths.predictor" => self.paths.predictor = Some(PathBuf::from(v)),

            _ => {
                return Err(bad(
                    line,
                    format!(
                        "unknown key `{key}` (sections: seed, cohort.*, embedding.*, gan.*, \
                         predictor.*, eval.*, sweep.*, paths.*)"
                    ),
                ))
            }
        }
        Ok(())
    }

    /// Ties the cross-section fields together and validates every section.
    /// Dimensions are never configured twice: the GAN and the predictor
    /// always consume `embedding.dim`-wide rows, and all per-stage seeds
    /// derive from the root seed.
    pub fn resolve(&mut self) -> Result<()> {
        self.cohort.seed = self.seed;
        self.ssl.seed = self.seed;
        self.gan.embed_dim = self.embedding.dim;
        self.predictor.embed_dim = self.embedding.dim;
        self.predictor.classes = 2;
        if self.eval.top_k < 2 {
            return Err(Error::invalid("eval.top_k must be >= 2"));
        }
        if self.sweep.seeds == 0 || self.sweep.rho_grid.is_empty() || self.sweep.mu_grid.is_empty()
        {
            return Err(Error::invalid("sweep: seeds and both grids must be non-empty"));
        }
        if !(0.0..=1.0).contains(&self.ssl.labeled_fraction) || self.ssl.labeled_fraction == 0.0 {
            return Err(Error::invalid(format!(
                "predictor.labeled_fraction {} must be in (0,1]",
                self.ssl.labeled_fraction
            )));
        }
        self.cohort.validate()?;
        self.embedding.validate()?;
        self.gan.validate()?;
        self.predictor.validate()?;
        self.ssl.validate()?;
        Ok(())
    }

    /// Canonical rendering of every effective value; `parse_str(echo())`
    /// reproduces the configuration exactly.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());

        let c = &self.cohort;
        kv("cohort.vocab_size", c.vocab_size.to_string());
        kv("cohort.clusters", c.clusters.to_string());
        kv("cohort.cluster_size", c.cluster_size.to_string());
        kv("cohort.signature_clusters", c.signature_clusters.to_string());
        kv("cohort.co_draw", c.co_draw.to_string());
        kv("cohort.base_cluster_rate", c.base_cluster_rate.to_string());
        kv("cohort.case_risk_mean", c.case_risk_mean.to_string());
        kv("cohort.case_risk_sd", c.case_risk_sd.to_string());
        kv("cohort.control_risk_mean", c.control_risk_mean.to_string());
        kv("cohort.control_risk_sd", c.control_risk_sd.to_string());
        kv("cohort.noise_rate", c.noise_rate.to_string());
        kv("cohort.cases", c.cases.to_string());
        kv("cohort.controls", c.controls.to_string());
        kv("cohort.length_shape", c.length_shape.to_string());
        kv("cohort.length_scale", c.length_scale.to_string());
        kv("cohort.windows_min", c.windows_min.to_string());
        kv("cohort.windows_max", c.windows_max.to_string());

        let e = &self.embedding;
        kv("embedding.dim", e.dim.to_string());
        kv("embedding.window", e.window.to_string());
        kv("embedding.negatives", e.negatives.to_string());
        kv("embedding.epochs", e.epochs.to_string());
        kv("embedding.lr", e.lr.to_string());

        let g = &self.gan;
        kv("gan.rho", g.rho.to_string());
        kv("gan.inner_steps", g.inner_steps.to_string());
        kv("gan.latent", g.latent.to_string());
        kv("gan.mask_p", g.mask_p.to_string());
        kv("gan.seq_rows", g.seq_rows.to_string());
        kv("gan.widths", render_list(&g.widths));
        kv("gan.maps", g.maps.to_string());
        kv("gan.smooth", g.smooth.to_string());
        kv("gan.batch_norm", g.batch_norm.to_string());
        kv("gan.batch", g.batch.to_string());
        kv("gan.max_iterations", g.max_iterations.to_string());
        kv("gan.converge_window", g.converge_window.to_string());
        kv("gan.converge_tol", g.converge_tol.to_string());
        kv("gan.lr", g.optim.lr.to_string());
        kv("gan.clip", g.optim.clip.to_string());
        kv("gan.l2", g.optim.l2.to_string());

        let p = &self.predictor;
        kv("predictor.widths", render_list(&p.widths));
        kv("predictor.maps", p.maps.to_string());
        kv("predictor.lr", p.optim.lr.to_string());
        kv("predictor.clip", p.optim.clip.to_string());
        let t = &self.ssl;
        kv("predictor.mode", t.mode.name().to_string());
        kv("predictor.mu", t.mu.to_string());
        kv("predictor.a", t.a.to_string());
        kv("predictor.labeled_fraction", t.labeled_fraction.to_string());
        kv("predictor.resample_per_epoch", t.resample_per_epoch.to_string());
        kv("predictor.batch", t.batch.to_string());
        kv("predictor.max_epochs", t.max_epochs.to_string());
        kv("predictor.patience", t.patience.to_string());

        kv("eval.top_k", self.eval.top_k.to_string());
        kv("eval.gen_count", self.eval.gen_count.to_string());

        kv("sweep.rho_grid", render_list(&self.sweep.rho_grid));
        kv("sweep.mu_grid", render_list(&self.sweep.mu_grid));
        kv("sweep.seeds", self.sweep.seeds.to_string());

        for (k, p) in [
            ("paths.corpus", &self.paths.corpus),
            ("paths.embedding", &self.paths.embedding),
            ("paths.gan_case", &self.paths.gan_case),
            ("paths.gan_control", &self.paths.gan_control),
            ("paths.predictor", &self.paths.predictor),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        s
    }

    /// SHA-256 of the canonical echo, hex-encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.echo().as_bytes());
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_echo_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.resolve().unwrap();
        let echo = cfg.echo();
        let back = RunConfig::parse_str(&echo).unwrap();
        assert_eq!(back.echo(), echo);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn overrides_apply_and_change_the_hash() {
        let mut base = RunConfig::default();
        base.resolve().unwrap();
        let text = "\
# comment line
seed = 99
cohort.vocab_size = 600   # trailing comment
gan.widths = 2, 3
predictor.mode = ssl-gan
predictor.resample_per_epoch = false
sweep.rho_grid = 0,0.1,1
paths.corpus = /tmp/x.txt
";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.cohort.seed, 99, "root seed propagates");
        assert_eq!(cfg.ssl.seed, 99);
        assert_eq!(cfg.cohort.vocab_size, 600);
        assert_eq!(cfg.gan.widths, vec![2, 3]);
        assert_eq!(cfg.ssl.mode, TrainMode::SslGan);
        assert!(!cfg.ssl.resample_per_epoch);
        assert_eq!(cfg.sweep.rho_grid, vec![0.0, 0.1, 1.0]);
        assert_eq!(cfg.paths.corpus.as_deref(), Some(Path::new("/tmp/x.txt")));
        assert_ne!(cfg.hash(), base.hash());

        let echo = cfg.echo();
        assert_eq!(RunConfig::parse_str(&echo).unwrap().hash(), cfg.hash());
    }

    #[test]
    fn embedding_dim_ties_gan_and_predictor() {
        let cfg = RunConfig::parse_str("embedding.dim = 64\ngan.seq_rows = 60\n").unwrap();
        assert_eq!(cfg.gan.embed_dim, 64);
        assert_eq!(cfg.predictor.embed_dim, 64);
    }

    #[test]
    fn bad_inputs_are_rejected_with_line_numbers() {
        let assert_line = |text: &str, want: usize| match RunConfig::parse_str(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, want, "for {text:?}"),
            other => panic!("expected config error for {text:?}, got {other:?}"),
        };
        assert_line("seed = 1\nnope.key = 2\n", 2);
        assert_line("seed = abc\n", 1);
        assert_line("seed 1\n", 1);
        assert_line("gan.widths = 3,x\n", 1);
        assert_line("seed = 1\n\nseed = 2\n", 3);
        assert_line("predictor.mode = cnn\n", 1);

        // section validation still applies to parsed values
        assert!(RunConfig::parse_str("gan.rho = 1.5\n").is_err());
        assert!(RunConfig::parse_str("predictor.labeled_fraction = 0\n").is_err());
    }
}
