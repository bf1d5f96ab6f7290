//! Optimizers used for training: RAdam (variance-rectified Adam), a
//! Lookahead wrapper holding slow weights, and a reduce-on-plateau
//! learning-rate schedule driven by the development MAE.
//!
//! The optimizers operate on flat `f64` buffers keyed by parameter name, so
//! they are independent of the tensor engine and their state serializes
//! exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A parameter buffer together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl NamedParam {
    pub fn new(name: impl Into<String>, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl RAdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.lr)));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Parameter(format!(
                "betas ({}, {}) must lie in (0, 1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon {} must be non-negative", self.epsilon)));
        }
        Ok(())
    }
}

/// Length of the approximated simple moving average at step `t` and, when
/// the variance is tractable (length above 4), the rectification factor.
pub fn rectification(step: u64, beta2: f64) -> (f64, Option<f64>) {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powf(step as f64);
    let rho = rho_inf - 2.0 * step as f64 * b2t / (1.0 - b2t);
    if rho > 4.0 {
        let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
        (rho, Some(r))
    } else {
        (rho, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub rho: f64,
    pub rectified: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RAdam {
    config: RAdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl RAdam {
    pub fn new(config: RAdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Rebuilds an optimizer from stored state.
    pub fn from_state(config: RAdamConfig, step: u64, moments: BTreeMap<String, Moments>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step, moments })
    }

    pub fn config(&self) -> &RAdamConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn step(&mut self, params: &mut [NamedParam]) -> Result<StepInfo> {
        for p in params.iter() {
            if p.value.len() != p.grad.len() {
                return Err(Error::InvalidInput(format!(
                    "parameter `{}` has {} values but {} gradients",
                    p.name,
                    p.value.len(),
                    p.grad.len()
                )));
            }
            if let Some(m) = self.moments.get(&p.name) {
                if m.first.len() != p.value.len() {
                    return Err(Error::InvalidInput(format!(
                        "parameter `{}` changed size from {} to {}",
                        p.name,
                        m.first.len(),
                        p.value.len()
                    )));
                }
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter `{}`", p.name)));
            }
        }

        self.step += 1;
        let RAdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as f64;
        let bias1 = 1.0 - beta1.powf(t);
        let bias2 = 1.0 - beta2.powf(t);
        let (rho, rect) = rectification(self.step, beta2);

        for p in params.iter_mut() {
            let m = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; p.value.len()],
                second: vec![0.0; p.value.len()],
            });
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                let m_hat = m.first[i] / bias1;
                p.value[i] -= match rect {
                    Some(r) => lr * r * m_hat * bias2.sqrt() / (m.second[i].sqrt() + epsilon),
                    None => lr * m_hat,
                };
            }
        }
        Ok(StepInfo {
            step: self.step,
            rho,
            rectified: rect.is_some(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookaheadConfig {
    pub k: u64,
    pub alpha: f64,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        Self { k: 5, alpha: 0.5 }
    }
}

/// Slow weights that every `k` inner steps move a fraction `alpha` toward
/// the fast weights, after which the fast weights restart from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Lookahead {
    config: LookaheadConfig,
    slow: BTreeMap<String, Vec<f64>>,
    counter: u64,
}

impl Lookahead {
    pub fn new(config: LookaheadConfig, params: &[NamedParam]) -> Result<Self> {
        let slow = params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Self::from_state(config, slow, 0)
    }

    pub fn from_state(config: LookaheadConfig, slow: BTreeMap<String, Vec<f64>>, counter: u64) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::Parameter("lookahead k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&config.alpha) {
            return Err(Error::Parameter(format!("lookahead alpha {} outside [0, 1]", config.alpha)));
        }
        Ok(Self { config, slow, counter })
    }

    pub fn config(&self) -> &LookaheadConfig {
        &self.config
    }

    pub fn slow(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.slow
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Call after every inner optimizer step. Returns true when a sync fired.
    pub fn after_step(&mut self, params: &mut [NamedParam]) -> Result<bool> {
        self.counter += 1;
        if self.counter % self.config.k != 0 {
            return Ok(false);
        }
        let alpha = self.config.alpha;
        for p in params.iter_mut() {
            let slow = self
                .slow
                .get_mut(&p.name)
                .ok_or_else(|| Error::InvalidInput(format!("no slow weights for parameter `{}`", p.name)))?;
            if slow.len() != p.value.len() {
                return Err(Error::InvalidInput(format!("slow weights of `{}` have the wrong size", p.name)));
            }
            for (s, f) in slow.iter_mut().zip(p.value.iter_mut()) {
                *s += alpha * (*f - *s);
                *f = *s;
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: u32,
    pub min_lr: f64,
    /// Absolute decrease required to count as an improvement.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 5,
            min_lr: 1e-6,
            threshold: 1e-4,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Parameter(format!("plateau factor {} outside (0, 1)", self.factor)));
        }
        if !(self.min_lr > 0.0) || !(self.threshold >= 0.0) {
            return Err(Error::Parameter("plateau min_lr must be positive and threshold non-negative".into()));
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule for a metric where lower is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub wait: u32,
}

impl Plateau {
    pub fn new(config: PlateauConfig, initial_lr: f64) -> Result<Self> {
        config.validate()?;
        if !(initial_lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate {initial_lr} must be positive")));
        }
        Ok(Self {
            config,
            lr: initial_lr,
            best: None,
            wait: 0,
        })
    }

    /// Feeds one epoch's metric and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64) -> f64 {
        let improved = match self.best {
            None => metric.is_finite(),
            Some(best) => metric < best - self.config.threshold,
        };
        if improved {
            self.best = Some(metric);
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait > self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr).min(self.lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar RAdam written straight from the published algorithm, kept apart
    /// from the buffer implementation above.
    fn reference_radam(theta0: f64, grad: impl Fn(f64) -> f64, lr: f64, steps: usize) -> Vec<(f64, bool)> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let (mut m, mut v, mut th) = (0.0, 0.0, theta0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = grad(th);
            v = b2 * v + (1.0 - b2) * g * g;
            m = b1 * m + (1.0 - b1) * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let rho = rho_inf - 2.0 * t as f64 * b2.powi(t as i32) / (1.0 - b2.powi(t as i32));
            if rho > 4.0 {
                let l = ((1.0 - b2.powi(t as i32)) / 1.0).sqrt() / (v.sqrt() + eps);
                let r = (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                th -= lr * mh * r * l;
                out.push((th, true));
            } else {
                th -= lr * mh;
                out.push((th, false));
            }
        }
        out
    }

    fn run_radam(theta0: f64, grad: impl Fn(f64) -> f64, lr: f64, steps: usize) -> Vec<(f64, bool)> {
        let mut opt = RAdam::new(RAdamConfig { lr, ..RAdamConfig::default() }).unwrap();
        let mut p = vec![NamedParam::new("theta", vec![theta0])];
        (0..steps)
            .map(|_| {
                p[0].grad[0] = grad(p[0].value[0]);
                let info = opt.step(&mut p).unwrap();
                (p[0].value[0], info.rectified)
            })
            .collect()
    }

    #[test]
    fn quadratic_iterates_match_reference() {
        let got = run_radam(1.0, |t| 2.0 * t, 0.1, 10);
        let want = reference_radam(1.0, |t| 2.0 * t, 0.1, 10);
        for ((a, fa), (b, fb)) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn rectification_branch_by_step() {
        // rho_t for beta2 = 0.999 crosses 4 between steps 4 and 5
        for t in 1..=4 {
            let (rho, r) = rectification(t, 0.999);
            assert!(rho <= 4.0 && r.is_none(), "step {t}: rho {rho}");
        }
        let (rho, r) = rectification(5, 0.999);
        assert!(rho > 4.0 && r.is_some());
        let flags: Vec<bool> = run_radam(1.0, |t| 2.0 * t, 0.1, 6).iter().map(|x| x.1).collect();
        assert_eq!(flags, [false, false, false, false, true, true]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut opt = RAdam::new(RAdamConfig::default()).unwrap();
        let mut p = vec![NamedParam::new("w", vec![0.5, -1.5, 3.0])];
        for _ in 0..20 {
            opt.step(&mut p).unwrap();
        }
        assert_eq!(p[0].value, vec![0.5, -1.5, 3.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = RAdam::new(RAdamConfig::default()).unwrap();
        let mut p = vec![NamedParam::new("head.fc1.weight", vec![1.0])];
        p[0].grad[0] = f64::NAN;
        let err = opt.step(&mut p).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("head.fc1.weight")));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn convex_quadratics_descend_after_warmup() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = rng.random_range(0.01..0.1);
            let c = rng.random_range(-3.0..3.0);
            let dist: f64 = rng.random_range(5.0..10.0);
            let theta0 = c + if rng.random::<bool>() { dist } else { -dist };
            let lr = rng.random_range(0.01..=0.1);
            let f = |t: f64| a * (t - c) * (t - c);
            let traj = run_radam(theta0, |t| 2.0 * a * (t - c), lr, 40);
            let losses: Vec<f64> = traj.iter().map(|(t, _)| f(*t)).collect();
            for w in losses[4..].windows(2) {
                assert!(w[1] < w[0], "loss rose: {w:?}");
            }
        }
    }

    #[test]
    fn lookahead_alpha_one_is_transparent() {
        let grad = |t: f64| 2.0 * (t - 0.3);
        let inner = run_radam(1.0, grad, 0.1, 20);
        let mut opt = RAdam::new(RAdamConfig { lr: 0.1, ..RAdamConfig::default() }).unwrap();
        let mut p = vec![NamedParam::new("theta", vec![1.0])];
        let mut la = Lookahead::new(LookaheadConfig { k: 5, alpha: 1.0 }, &p).unwrap();
        for (i, (want, _)) in inner.iter().enumerate() {
            p[0].grad[0] = grad(p[0].value[0]);
            opt.step(&mut p).unwrap();
            la.after_step(&mut p).unwrap();
            if (i + 1) % 5 == 0 {
                assert!((p[0].value[0] - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn lookahead_alpha_zero_resets() {
        let mut p = vec![NamedParam::new("w", vec![2.0])];
        let mut la = Lookahead::new(LookaheadConfig { k: 3, alpha: 0.0 }, &p).unwrap();
        for i in 1..=9 {
            p[0].value[0] += 1.0;
            let synced = la.after_step(&mut p).unwrap();
            assert_eq!(synced, i % 3 == 0);
            if synced {
                assert_eq!(p[0].value[0], 2.0);
            }
        }
    }

    #[test]
    fn lookahead_slow_sequence_matches_hand_interpolation() {
        let grad = |t: f64| 2.0 * t;
        let mut opt = RAdam::new(RAdamConfig { lr: 0.1, ..RAdamConfig::default() }).unwrap();
        let mut p = vec![NamedParam::new("theta", vec![1.0])];
        let mut la = Lookahead::new(LookaheadConfig { k: 5, alpha: 0.5 }, &p).unwrap();
        let mut slow = 1.0;
        let mut fast_before_sync = Vec::new();
        let mut slow_seq = Vec::new();
        for _ in 0..20 {
            p[0].grad[0] = grad(p[0].value[0]);
            opt.step(&mut p).unwrap();
            let fast = p[0].value[0];
            if la.after_step(&mut p).unwrap() {
                fast_before_sync.push(fast);
                slow_seq.push(p[0].value[0]);
            }
        }
        for (f, got) in fast_before_sync.iter().zip(&slow_seq) {
            slow = slow + 0.5 * (f - slow);
            assert_eq!(*got, slow);
        }
        assert_eq!(slow_seq.len(), 4);
    }

    #[test]
    fn plateau_counting_rule() {
        let cfg = PlateauConfig {
            factor: 0.5,
            patience: 2,
            min_lr: 1e-3,
            threshold: 1e-4,
        };
        let mut s = Plateau::new(cfg, 0.1).unwrap();
        let lrs: Vec<f64> = [5.0, 5.0, 5.0, 5.0].iter().map(|m| s.step(*m)).collect();
        assert_eq!(lrs, [0.1, 0.1, 0.1, 0.05]);

        let mut s = Plateau::new(cfg, 0.1).unwrap();
        for m in [9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0] {
            assert_eq!(s.step(m), 0.1);
        }

        let mut s = Plateau::new(cfg, 1e-3).unwrap();
        for _ in 0..12 {
            assert_eq!(s.step(1.0), 1e-3);
        }
    }

    #[test]
    fn plateau_threshold_ignores_float_noise() {
        let cfg = PlateauConfig {
            patience: 0,
            ..PlateauConfig::default()
        };
        let mut s = Plateau::new(cfg, 0.1).unwrap();
        s.step(5.0);
        assert_eq!(s.step(5.0 - 5e-5), 0.05);
        assert_eq!(s.step(4.0), 0.05);
    }

    #[test]
    fn plateau_lr_positive_and_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = Plateau::new(PlateauConfig::default(), 3e-4).unwrap();
        let mut prev = s.lr;
        for _ in 0..500 {
            let lr = s.step(rng.random_range(0.0..10.0));
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }
}
