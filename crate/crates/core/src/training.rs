//! Steepest-descent tuning of the membership parameters.
//!
//! Updates are per pattern: for each `(D_k, dR_k)` the squared error
//! `E_k = (z_k - dR_k)^2 / 2` is differentiated through the forward pass and
//! every shape parameter takes a step of `-eta * dE_k/dp`.

use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fuzzy::{
    alpha_is_clamped, clamp_alpha, forward, infer, FisParams, ParamId, ALPHA_CLAMP,
};
use crate::scalar::{lit, Real};

/// Crisp `(mismatch, target adjustment)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet<T> {
    patterns: Vec<(T, T)>,
}

impl<T: Real> TrainingSet<T> {
    pub fn new(patterns: Vec<(T, T)>) -> Result<Self> {
        if patterns.is_empty() {
            return Err(Error::InsufficientData("training set has no patterns"));
        }
        if let Some(k) = patterns
            .iter()
            .position(|(d, r)| !(d.is_finite() && r.is_finite()))
        {
            return Err(Error::invalid(
                format!("pattern {}", k + 1),
                "values must be finite",
            ));
        }
        Ok(Self { patterns })
    }

    pub fn patterns(&self) -> &[(T, T)] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<T> {
    pub learning_rate: T,
    pub epochs: usize,
    pub shuffle_seed: u64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: lit(0.01),
            epochs: 500,
            shuffle_seed: 0,
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > T::zero()) {
            return Err(Error::invalid("learning_rate", "must be finite and > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Partial derivatives of one pattern error with respect to each parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisGradient<T>(pub [T; 12]);

impl<T: Real> FisGradient<T> {
    pub fn zero() -> Self {
        Self([T::zero(); 12])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, T)> + '_ {
        ParamId::ALL.into_iter().map(|id| (id, self.0[id.index()]))
    }
}

impl<T> Index<ParamId> for FisGradient<T> {
    type Output = T;

    fn index(&self, id: ParamId) -> &T {
        &self.0[id as usize]
    }
}

impl<T> IndexMut<ParamId> for FisGradient<T> {
    fn index_mut(&mut self, id: ParamId) -> &mut T {
        &mut self.0[id as usize]
    }
}

pub fn pattern_error<T: Real>(z_k: T, target: T) -> T {
    let e = z_k - target;
    lit::<T>(0.5) * e * e
}

/// Mean pattern error of `fis` over `data`.
pub fn mean_loss<T: Real>(fis: &FisParams<T>, data: &TrainingSet<T>) -> T {
    let total = data.patterns().iter().fold(T::zero(), |acc, &(d, t)| {
        acc + pattern_error(infer(d, fis), t)
    });
    total / lit::<T>(data.len() as f64)
}

/// Exact gradient of the pattern error through the forward pass.
///
/// Clamped firing levels and zero-slope consequents contribute nothing
/// through the inverted consequent, and the maintain width never receives
/// gradient because the maintain rule outputs its mode.
pub fn analytic_gradients<T: Real>(fis: &FisParams<T>, d_k: T, target: T) -> FisGradient<T> {
    let f = forward(d_k, fis);
    let err = f.output - target;
    let mut g = FisGradient::zero();
    if f.fallback {
        g[ParamId::C1] = err;
        return g;
    }

    let [a_n, a_z, a_p] = f.alpha;
    let total = a_n + a_z + a_p;
    let one = T::one();

    // sensitivity of the output to each firing level, through beta and z
    let inverse_slope = |alpha: T, slope: T| -> T {
        if slope == T::zero() || alpha_is_clamped(alpha) {
            T::zero()
        } else {
            one / (slope * alpha * (one - alpha))
        }
    };
    let dout_dn = (f.z[0] - f.output) / total + f.beta[0] * inverse_slope(a_n, fis.increase.a);
    let dout_dz = (f.z[1] - f.output) / total;
    let dout_dp = (f.z[2] - f.output) / total + f.beta[2] * inverse_slope(a_p, fis.decrease.a);

    // antecedents
    let sn = a_n * (one - a_n);
    g[ParamId::A2] = dout_dn * sn * (d_k - fis.negative.b);
    g[ParamId::B2] = -dout_dn * sn * fis.negative.a;
    let sp = a_p * (one - a_p);
    g[ParamId::A1] = dout_dp * sp * (d_k - fis.positive.b);
    g[ParamId::B1] = -dout_dp * sp * fis.positive.a;
    let sigma = fis.zero.sigma();
    let dx = d_k - fis.zero.c;
    g[ParamId::C2] = dout_dz * a_z * dx / (sigma * sigma);
    g[ParamId::Sigma2] = dout_dz * a_z * dx * dx / (sigma * sigma * sigma);

    // consequents
    let logit = |alpha: T| {
        let c = clamp_alpha(alpha);
        (c / (one - c)).ln()
    };
    g[ParamId::B4] = f.beta[0];
    if fis.increase.a != T::zero() {
        g[ParamId::A4] = -f.beta[0] * logit(a_n) / (fis.increase.a * fis.increase.a);
    }
    g[ParamId::B3] = f.beta[2];
    if fis.decrease.a != T::zero() {
        g[ParamId::A3] = -f.beta[2] * logit(a_p) / (fis.decrease.a * fis.decrease.a);
    }
    g[ParamId::C1] = f.beta[1];

    for v in g.0.iter_mut() {
        *v *= err;
    }
    g
}

/// Central-difference gradient of the pattern error.
pub fn finite_diff_gradients<T: Real>(
    fis: &FisParams<T>,
    d_k: T,
    target: T,
    step: T,
) -> FisGradient<T> {
    let mut g = FisGradient::zero();
    for id in ParamId::ALL {
        let v = fis.get(id);
        let mut plus = *fis;
        plus.set(id, v + step);
        let mut minus = *fis;
        minus.set(id, v - step);
        let span = plus.get(id) - minus.get(id);
        if span == T::zero() {
            continue;
        }
        let ep = pattern_error(infer(d_k, &plus), target);
        let em = pattern_error(infer(d_k, &minus), target);
        g[id] = (ep - em) / span;
    }
    g
}

/// `p <- p - eta * dE/dp` for every parameter; widths stay above the floor.
pub fn sgd_step<T: Real>(fis: &FisParams<T>, grads: &FisGradient<T>, eta: T) -> FisParams<T> {
    let mut out = *fis;
    for (id, gv) in grads.iter() {
        out.set(id, fis.get(id) - eta * gv);
    }
    out
}

/// Per-pattern steepest descent. Pattern order is reshuffled every epoch
/// from `cfg.shuffle_seed`; the returned history holds the mean pattern
/// error over the whole set after each epoch.
pub fn train<T: Real>(
    fis: &FisParams<T>,
    data: &TrainingSet<T>,
    cfg: &TrainConfig<T>,
) -> Result<(FisParams<T>, Vec<T>)> {
    cfg.validate()?;
    fis.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut params = *fis;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let (d, t) = data.patterns()[k];
            let g = analytic_gradients(&params, d, t);
            params = sgd_step(&params, &g, cfg.learning_rate);
        }
        let loss = mean_loss(&params, data);
        if !loss.is_finite() || params.validate().is_err() {
            return Err(Error::Divergence { epoch });
        }
        history.push(loss);
    }
    Ok((params, history))
}

/// Piecewise-linear target adjustment encoding the three adaptation rules:
/// hold inside the dead band, decrease for positive mismatch, increase for
/// negative mismatch, saturating `span` beyond the dead band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetRule {
    pub decrease_gain: f64,
    pub increase_gain: f64,
    pub deadband: f64,
    pub span: f64,
    /// Standard deviation of Gaussian noise added to each target.
    pub noise_std: f64,
}

impl Default for TargetRule {
    fn default() -> Self {
        Self {
            decrease_gain: 0.2,
            increase_gain: 0.2,
            deadband: 0.002,
            span: 0.03,
            noise_std: 0.0,
        }
    }
}

impl TargetRule {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("decrease_gain", self.decrease_gain > 0.0),
            ("increase_gain", self.increase_gain > 0.0),
            ("deadband", self.deadband >= 0.0),
            ("span", self.span > 0.0),
            ("noise_std", self.noise_std >= 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::invalid(name, "out of range"));
            }
        }
        Ok(())
    }

    pub fn target(&self, d: f64) -> f64 {
        if d > self.deadband {
            -self.decrease_gain * (d - self.deadband).min(self.span)
        } else if d < -self.deadband {
            self.increase_gain * (-d - self.deadband).min(self.span)
        } else {
            0.0
        }
    }
}

/// Samples `rule` on `grid`; `seed` drives the optional target noise.
pub fn generate_training_set<T: Real>(
    rule: &TargetRule,
    grid: &[f64],
    seed: u64,
) -> Result<TrainingSet<T>> {
    rule.validate()?;
    if grid.is_empty() {
        return Err(Error::InsufficientData("training grid is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise =
        Normal::new(0.0, rule.noise_std).map_err(|e| Error::invalid("noise_std", e.to_string()))?;
    let patterns = grid
        .iter()
        .map(|&d| {
            let jitter = if rule.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (lit::<T>(d), lit::<T>(rule.target(d) + jitter))
        })
        .collect();
    TrainingSet::new(patterns)
}

/// Evenly spaced grid of `n >= 2` points on `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Network whose rule lines reproduce `rule` outside the dead band.
///
/// A sigmoid antecedent `s(k (x - b))` inverted through a sigmoid consequent
/// of slope `-k / g` gives the straight line `-g (x - b)`; the firing-level
/// clamp saturates it at `|x - b| = span`. Starting point for training.
pub fn designed_fis<T: Real>(rule: &TargetRule) -> FisParams<T> {
    let edge = ((1.0 - ALPHA_CLAMP) / ALPHA_CLAMP).ln();
    let k = edge / rule.span;
    let db = rule.deadband.max(1e-4);
    FisParams::from_array(
        [
            k,
            rule.deadband,
            -k,
            -rule.deadband,
            -k / rule.decrease_gain,
            0.0,
            k / rule.increase_gain,
            0.0,
            0.0,
            db,
            0.0,
            db,
        ]
        .map(lit::<T>),
    )
}
