//! Named parameter sets with Adam state and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether an entry counts as a weight (eligible for L2 penalties) or a
/// bias-like vector (biases, batch-norm gains/shifts), which never is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    kind: ParamKind,
}

/// Adam hyperparameters plus the clipping threshold and the L2 coefficient
/// consumed by loss builders (the optimizer itself never applies `l2`).
#[derive(Debug, Clone, serde::Serialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; gradients are rescaled, not truncated.
    pub clip: f64,
    /// L2 penalty coefficient for `Weight` entries, applied by whichever
    /// loss construction opts in (the discriminator does).
    pub l2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 5.0, l2: 0.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("optim: lr {} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("optim: {name} {b} must be in [0,1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid(format!("optim: eps {} must be > 0", self.eps)));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(Error::invalid(format!("optim: clip {} must be > 0", self.clip)));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::invalid(format!("optim: l2 {} must be >= 0", self.l2)));
        }
        Ok(())
    }
}

/// A named collection of parameters sharing one Adam state and step counter.
#[derive(Debug, Clone)]
pub struct ParamSet {
    name: String,
    entries: BTreeMap<String, Param>,
    step: u64,
}

impl ParamSet {
    pub fn new(name: &str) -> ParamSet {
        ParamSet { name: name.to_string(), entries: BTreeMap::new(), step: 0 }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn insert(&mut self, entry: &str, value: Tensor, kind: ParamKind) -> Result<()> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("param {}/{entry} initial value", self.name)));
        }
        if self.entries.contains_key(entry) {
            return Err(Error::invalid(format!("duplicate param {}/{entry}", self.name)));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            entry.to_string(),
            Param {
                value,
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                kind,
            },
        );
        Ok(())
    }

    pub fn value(&self, entry: &str) -> Result<&Tensor> {
        self.entries
            .get(entry)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("unknown param {}/{entry}", self.name)))
    }

    pub fn value_mut(&mut self, entry: &str) -> Result<&mut Tensor> {
        let name = self.name.clone();
        self.entries
            .get_mut(entry)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::invalid(format!("unknown param {name}/{entry}")))
    }

    pub fn grad(&self, entry: &str) -> Result<&Tensor> {
        self.entries
            .get(entry)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::invalid(format!("unknown param {}/{entry}", self.name)))
    }

    pub fn entry_names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn kind(&self, entry: &str) -> Option<ParamKind> {
        self.entries.get(entry).map(|p| p.kind)
    }

    /// Names of `Weight` entries (the L2-penalized subset).
    pub fn weight_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Pull this set's gradients out of a graph gradient map keyed by
    /// `<set>/<entry>`; other sets' keys are ignored.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let prefix = format!("{}/", self.name);
        for (key, g) in grads {
            let Some(entry) = key.strip_prefix(&prefix) else { continue };
            let p = self
                .entries
                .get_mut(entry)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown param {key}")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "gradient for {key}: {:?} vs param {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            for (a, d) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += d;
            }
        }
        Ok(())
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Clip gradients to `cfg.clip` by global norm, take one Adam step,
    /// zero the gradients, and return the pre-clip norm. Rejects non-finite
    /// gradients before touching any state.
    pub fn clip_and_step(&mut self, cfg: &OptimConfig) -> Result<f64> {
        cfg.validate()?;
        for (name, p) in &self.entries {
            if !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}/{name}", self.name)));
            }
        }
        let norm = self.global_grad_norm();
        let scale = if norm > cfg.clip { cfg.clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.entries.values_mut() {
            for i in 0..p.value.len() {
                let g = p.grad.data()[i] * scale;
                let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                p.value.data_mut()[i] -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            }
            p.grad.data_mut().fill(0.0);
        }
        Ok(norm)
    }

    /// Snapshot of parameter values keyed by entry name.
    pub fn values_map(&self) -> BTreeMap<String, Tensor> {
        self.entries.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect()
    }

    /// Overwrite values from a map with exactly the same keys and shapes;
    /// optimizer state is reset (a loaded model starts a fresh schedule).
    pub fn set_values(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        if map.len() != self.entries.len() {
            return Err(Error::Mismatch(format!(
                "param set {}: {} entries on disk, {} expected",
                self.name,
                map.len(),
                self.entries.len()
            )));
        }
        for (name, p) in &mut self.entries {
            let t = map.get(name).ok_or_else(|| {
                Error::Mismatch(format!("param set {}: missing entry {name}", self.name))
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::Mismatch(format!(
                    "param {}/{name}: shape {:?} on disk, {:?} expected",
                    self.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("param {}/{name} on disk", self.name)));
            }
            p.value = t.clone();
            p.m.data_mut().fill(0.0);
            p.v.data_mut().fill(0.0);
        }
        self.step = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_for(set: &ParamSet, g: &[f64]) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(format!("{}/x", set.name()), Tensor::from_vec(&[g.len()], g.to_vec()).unwrap());
        m
    }

    /// Adam on f(x) = (x - 3)^2 converges to 3.
    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new("q");
        ps.insert("x", Tensor::from_vec(&[1], vec![-4.0]).unwrap(), ParamKind::Weight).unwrap();
        let cfg = OptimConfig { lr: 0.05, ..OptimConfig::default() };
        for _ in 0..2000 {
            let x = ps.value("x").unwrap().data()[0];
            ps.accumulate(&grads_for(&ps, &[2.0 * (x - 3.0)])).unwrap();
            ps.clip_and_step(&cfg).unwrap();
        }
        let x = ps.value("x").unwrap().data()[0];
        assert!((x - 3.0).abs() < 1e-6, "x = {x}");
    }

    /// One hand-computed Adam step, with clipping engaged (norm 10 -> 5).
    #[test]
    fn first_step_matches_hand_computation() {
        let mut ps = ParamSet::new("h");
        ps.insert("x", Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap(), ParamKind::Weight)
            .unwrap();
        ps.accumulate(&grads_for(&ps, &[6.0, 8.0])).unwrap();
        let cfg = OptimConfig::default(); // lr 1e-3, clip 5
        let norm = ps.clip_and_step(&cfg).unwrap();
        assert!((norm - 10.0).abs() < 1e-12);
        // clipped grads: [3,4]; t=1 bias corrections make mhat=g, vhat=g^2
        // so update = lr * g / (|g| + eps) ~ lr * sign(g)
        let want = 1.0 - 1e-3 * (3.0 / (3.0 + 1e-8));
        let got = ps.value("x").unwrap().data()[0];
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn norm_below_clip_is_untouched() {
        let mut ps = ParamSet::new("n");
        ps.insert("x", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), ParamKind::Weight)
            .unwrap();
        ps.accumulate(&grads_for(&ps, &[0.3, 0.4])).unwrap();
        let norm = ps.clip_and_step(&OptimConfig::default()).unwrap();
        assert!((norm - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_gradient_rejected() {
        let mut ps = ParamSet::new("bad");
        ps.insert("x", Tensor::from_vec(&[1], vec![0.0]).unwrap(), ParamKind::Weight).unwrap();
        ps.accumulate(&grads_for(&ps, &[f64::NAN])).unwrap();
        assert!(ps.clip_and_step(&OptimConfig::default()).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = OptimConfig { lr: 0.0, ..OptimConfig::default() };
        assert!(bad.validate().is_err());
        let bad2 = OptimConfig { beta1: 1.0, ..OptimConfig::default() };
        assert!(bad2.validate().is_err());
        let bad3 = OptimConfig { clip: -1.0, ..OptimConfig::default() };
        assert!(bad3.validate().is_err());
    }

    #[test]
    fn set_values_checks_keys_and_shapes() {
        let mut ps = ParamSet::new("s");
        ps.insert("a", Tensor::zeros(&[2]), ParamKind::Weight).unwrap();
        let mut ok = BTreeMap::new();
        ok.insert("a".to_string(), Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        ps.set_values(&ok).unwrap();
        assert_eq!(ps.value("a").unwrap().data(), &[1.0, 2.0]);
        let mut bad = BTreeMap::new();
        bad.insert("a".to_string(), Tensor::zeros(&[3]));
        assert!(ps.set_values(&bad).is_err());
    }
}
