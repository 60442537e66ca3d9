//! Membership functions and the three-rule Tsukamoto inference network that
//! maps a covariance mismatch to a noise adjustment.
//!
//! Rule base, evaluated once per diagonal channel:
//!
//! | antecedent (mismatch) | consequent (adjustment) |
//! |-----------------------|-------------------------|
//! | Negative `N`          | Increase `I`            |
//! | Zero `Z`              | Maintain `M`            |
//! | Positive `P`          | Decrease `D`            |
//!
//! Firing levels are normalized and each rule contributes the inverse of its
//! consequent membership at its firing level. The Gaussian `M` is not
//! invertible, so the maintain rule contributes its mode `c1`.

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Lower bound applied to every Gaussian width.
pub const SIGMA_MIN: f64 = 1e-3;
/// Firing levels are clamped to `[ALPHA_CLAMP, 1 - ALPHA_CLAMP]` before a
/// sigmoid consequent is inverted.
pub const ALPHA_CLAMP: f64 = 1e-9;
/// Below this total firing strength the maintain rule is used alone.
pub const FIRING_EPS: f64 = 1e-12;

/// `1 / (1 + exp(-a (x - b)))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmoidParams<T> {
    pub a: T,
    pub b: T,
}

impl<T: Real> SigmoidParams<T> {
    pub fn new(a: T, b: T) -> Self {
        Self { a, b }
    }

    /// A zero slope gives a constant 0.5 membership.
    pub fn is_degenerate(&self) -> bool {
        self.a == T::zero()
    }
}

/// `exp(-(x - c)^2 / (2 sigma^2))` with `sigma >= SIGMA_MIN`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussParams<T> {
    pub c: T,
    sigma: T,
}

impl<T: Real> GaussParams<T> {
    pub fn new(c: T, sigma: T) -> Self {
        Self {
            c,
            sigma: clamp_sigma(sigma),
        }
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn set_sigma(&mut self, sigma: T) {
        self.sigma = clamp_sigma(sigma);
    }
}

fn clamp_sigma<T: Real>(sigma: T) -> T {
    let floor = lit::<T>(SIGMA_MIN);
    if sigma.is_finite() && sigma > floor {
        sigma
    } else if sigma.is_finite() {
        floor
    } else {
        sigma
    }
}

/// Every shape parameter of the inference network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisParams<T> {
    /// Antecedent `P(a1, b1)`.
    pub positive: SigmoidParams<T>,
    /// Antecedent `N(a2, b2)`.
    pub negative: SigmoidParams<T>,
    /// Consequent `D(a3, b3)`.
    pub decrease: SigmoidParams<T>,
    /// Consequent `I(a4, b4)`.
    pub increase: SigmoidParams<T>,
    /// Consequent `M(c1, sigma1)`.
    pub maintain: GaussParams<T>,
    /// Antecedent `Z(c2, sigma2)`.
    pub zero: GaussParams<T>,
}

/// Flat index over the twelve trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    A1,
    B1,
    A2,
    B2,
    A3,
    B3,
    A4,
    B4,
    C1,
    Sigma1,
    C2,
    Sigma2,
}

impl ParamId {
    pub const ALL: [ParamId; 12] = [
        ParamId::A1,
        ParamId::B1,
        ParamId::A2,
        ParamId::B2,
        ParamId::A3,
        ParamId::B3,
        ParamId::A4,
        ParamId::B4,
        ParamId::C1,
        ParamId::Sigma1,
        ParamId::C2,
        ParamId::Sigma2,
    ];

    /// Key used in `.fis` files.
    pub fn key(self) -> &'static str {
        match self {
            ParamId::A1 => "a1",
            ParamId::B1 => "b1",
            ParamId::A2 => "a2",
            ParamId::B2 => "b2",
            ParamId::A3 => "a3",
            ParamId::B3 => "b3",
            ParamId::A4 => "a4",
            ParamId::B4 => "b4",
            ParamId::C1 => "c1",
            ParamId::Sigma1 => "sigma1",
            ParamId::C2 => "c2",
            ParamId::Sigma2 => "sigma2",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.key() == key)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_width(self) -> bool {
        matches!(self, ParamId::Sigma1 | ParamId::Sigma2)
    }
}

impl<T: Real> FisParams<T> {
    /// Builds from the flat `[a1, b1, a2, b2, a3, b3, a4, b4, c1, sigma1, c2, sigma2]` layout.
    pub fn from_array(v: [T; 12]) -> Self {
        Self {
            positive: SigmoidParams::new(v[0], v[1]),
            negative: SigmoidParams::new(v[2], v[3]),
            decrease: SigmoidParams::new(v[4], v[5]),
            increase: SigmoidParams::new(v[6], v[7]),
            maintain: GaussParams::new(v[8], v[9]),
            zero: GaussParams::new(v[10], v[11]),
        }
    }

    pub fn to_array(&self) -> [T; 12] {
        let mut out = [T::zero(); 12];
        for id in ParamId::ALL {
            out[id.index()] = self.get(id);
        }
        out
    }

    pub fn get(&self, id: ParamId) -> T {
        match id {
            ParamId::A1 => self.positive.a,
            ParamId::B1 => self.positive.b,
            ParamId::A2 => self.negative.a,
            ParamId::B2 => self.negative.b,
            ParamId::A3 => self.decrease.a,
            ParamId::B3 => self.decrease.b,
            ParamId::A4 => self.increase.a,
            ParamId::B4 => self.increase.b,
            ParamId::C1 => self.maintain.c,
            ParamId::Sigma1 => self.maintain.sigma,
            ParamId::C2 => self.zero.c,
            ParamId::Sigma2 => self.zero.sigma,
        }
    }

    /// Sets one parameter; widths are re-clamped to [`SIGMA_MIN`].
    pub fn set(&mut self, id: ParamId, v: T) {
        match id {
            ParamId::A1 => self.positive.a = v,
            ParamId::B1 => self.positive.b = v,
            ParamId::A2 => self.negative.a = v,
            ParamId::B2 => self.negative.b = v,
            ParamId::A3 => self.decrease.a = v,
            ParamId::B3 => self.decrease.b = v,
            ParamId::A4 => self.increase.a = v,
            ParamId::B4 => self.increase.b = v,
            ParamId::C1 => self.maintain.c = v,
            ParamId::Sigma1 => self.maintain.set_sigma(v),
            ParamId::C2 => self.zero.c = v,
            ParamId::Sigma2 => self.zero.set_sigma(v),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for id in ParamId::ALL {
            if !self.get(id).is_finite() {
                return Err(Error::invalid(id.key(), "must be finite"));
            }
        }
        Ok(())
    }

    /// Keys of sigmoid parameters whose zero slope makes them constant.
    pub fn degenerate_slopes(&self) -> Vec<&'static str> {
        [
            ("a1", self.positive),
            ("a2", self.negative),
            ("a3", self.decrease),
            ("a4", self.increase),
        ]
        .into_iter()
        .filter(|(_, p)| p.is_degenerate())
        .map(|(k, _)| k)
        .collect()
    }
}

pub fn sigmoid_mf<T: Real>(x: T, p: &SigmoidParams<T>) -> T {
    T::one() / (T::one() + (-p.a * (x - p.b)).exp())
}

pub fn gauss_mf<T: Real>(x: T, p: &GaussParams<T>) -> T {
    let d = x - p.c;
    (-(d * d) / (lit::<T>(2.0) * p.sigma * p.sigma)).exp()
}

/// Clamped inverse of a sigmoid membership. A zero slope has no inverse and
/// maps every level to the center `b`.
pub fn sigmoid_inverse<T: Real>(alpha: T, p: &SigmoidParams<T>) -> T {
    if p.is_degenerate() {
        return p.b;
    }
    let alpha = clamp_alpha(alpha);
    p.b + (alpha / (T::one() - alpha)).ln() / p.a
}

pub(crate) fn clamp_alpha<T: Real>(alpha: T) -> T {
    let lo = lit::<T>(ALPHA_CLAMP);
    let hi = T::one() - lo;
    alpha.max(lo).min(hi)
}

pub(crate) fn alpha_is_clamped<T: Real>(alpha: T) -> bool {
    let lo = lit::<T>(ALPHA_CLAMP);
    alpha <= lo || alpha >= T::one() - lo
}

/// Firing levels `(N(x), Z(x), P(x))`.
pub fn fire_rules<T: Real>(x: T, fis: &FisParams<T>) -> [T; 3] {
    [
        sigmoid_mf(x, &fis.negative),
        gauss_mf(x, &fis.zero),
        sigmoid_mf(x, &fis.positive),
    ]
}

/// Normalizes firing levels to sum to one; an all-zero input selects the
/// maintain rule alone.
pub fn normalize_firing<T: Real>(alpha: [T; 3]) -> [T; 3] {
    let total = alpha[0] + alpha[1] + alpha[2];
    if total < lit(FIRING_EPS) {
        return [T::zero(), T::one(), T::zero()];
    }
    [alpha[0] / total, alpha[1] / total, alpha[2] / total]
}

/// Crisp rule outputs `(I^-1(alpha1), c1, D^-1(alpha3))`.
pub fn rule_outputs<T: Real>(alpha: [T; 3], fis: &FisParams<T>) -> [T; 3] {
    [
        sigmoid_inverse(alpha[0], &fis.increase),
        fis.maintain.c,
        sigmoid_inverse(alpha[2], &fis.decrease),
    ]
}

pub fn aggregate<T: Real>(beta: [T; 3], z: [T; 3]) -> T {
    beta[0] * z[0] + beta[1] * z[1] + beta[2] * z[2]
}

/// Adjustment for a single mismatch value.
pub fn infer<T: Real>(x: T, fis: &FisParams<T>) -> T {
    forward(x, fis).output
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forward<T> {
    pub alpha: [T; 3],
    pub beta: [T; 3],
    pub z: [T; 3],
    pub output: T,
    /// True when the total firing strength fell below [`FIRING_EPS`].
    pub fallback: bool,
}

pub fn forward<T: Real>(x: T, fis: &FisParams<T>) -> Forward<T> {
    let alpha = fire_rules(x, fis);
    let beta = normalize_firing(alpha);
    let z = rule_outputs(alpha, fis);
    Forward {
        alpha,
        beta,
        z,
        output: aggregate(beta, z),
        fallback: alpha[0] + alpha[1] + alpha[2] < lit(FIRING_EPS),
    }
}

/// Centroid of a sampled membership function.
pub fn centroid_defuzzify<T: Real>(domain: &[T], mu: &[T]) -> Result<T> {
    if domain.is_empty() {
        return Err(Error::Degenerate("empty defuzzification grid"));
    }
    if domain.len() != mu.len() {
        return Err(Error::LengthMismatch {
            expected: domain.len(),
            found: mu.len(),
        });
    }
    let (num, den) = domain
        .iter()
        .zip(mu)
        .fold((T::zero(), T::zero()), |(n, d), (&x, &m)| {
            (n + x * m, d + m)
        });
    if den <= T::zero() {
        return Err(Error::Degenerate("membership values sum to zero"));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::presets::{initial_fis, learned_fis};

    #[test]
    fn sigmoid_examples() {
        let p = SigmoidParams::new(0.7, -2.0);
        assert_eq!(sigmoid_mf(-2.0, &p), 0.5);
        let learned_n = SigmoidParams::new(0.1515, 13.8108);
        assert_eq!(sigmoid_mf(13.8108, &learned_n), 0.5);
        let unit = SigmoidParams::new(1.0, 0.0);
        assert_relative_eq!(sigmoid_mf(20.0, &unit), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn gauss_examples() {
        let p = GaussParams::new(0.0467, 0.0620);
        assert_eq!(gauss_mf(0.0467, &p), 1.0);
        assert_relative_eq!(
            gauss_mf(0.0467 + 0.0620, &p),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            gauss_mf(0.0467 + 0.03, &p),
            gauss_mf(0.0467 - 0.03, &p),
            epsilon = 1e-15
        );
    }

    #[test]
    fn sigma_is_clamped() {
        assert_eq!(GaussParams::new(0.03, 0.0).sigma(), SIGMA_MIN);
        assert_eq!(initial_fis::<f64>().maintain.sigma(), SIGMA_MIN);
        let mut g = GaussParams::new(0.0, 1.0);
        g.set_sigma(-4.0);
        assert_eq!(g.sigma(), SIGMA_MIN);
    }

    #[test]
    fn fire_rules_examples() {
        let fis = learned_fis::<f64>();
        assert_eq!(fire_rules(fis.zero.c, &fis)[1], 1.0);
        assert_eq!(fire_rules(fis.negative.b, &fis)[0], 0.5);
        let alpha = fire_rules(0.0, &fis);
        // frozen from the first evaluation of the learned parameters at zero mismatch
        let expected = [
            0.109_843_936_528_461_6,
            0.753_011_666_643_094_3,
            0.137_670_256_542_155_3,
        ];
        for (a, e) in alpha.iter().zip(expected) {
            assert!((0.0..=1.0).contains(a));
            assert_relative_eq!(*a, e, max_relative = 1e-12);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_firing([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5]);
        assert_eq!(normalize_firing([1.0, 1.0, 2.0]), [0.25, 0.25, 0.5]);
        assert_eq!(normalize_firing([0.0, 0.0, 0.0]), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn rule_output_examples() {
        let fis = learned_fis::<f64>();
        let z = rule_outputs([0.5, 0.3, 0.5], &fis);
        assert_eq!(z[0], fis.increase.b);
        assert_eq!(z[2], fis.decrease.b);
        for a2 in [0.0, 0.2, 1.0] {
            assert_eq!(rule_outputs([0.5, a2, 0.5], &fis)[1], fis.maintain.c);
        }
        let bounded = rule_outputs([0.0, 0.0, 1.0], &fis);
        assert!(bounded.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_consequent_inverts_to_center() {
        let fis = initial_fis::<f64>();
        assert_eq!(fis.degenerate_slopes(), vec!["a3"]);
        assert_eq!(rule_outputs([0.3, 0.1, 0.9], &fis)[2], fis.decrease.b);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate([0.0, 1.0, 0.0], [7.0, -3.0, 9.0]), -3.0);
        assert_eq!(aggregate([0.5, 0.5, 0.0], [2.0, 4.0, 1e6]), 3.0);
    }

    #[test]
    fn infer_is_the_composition() {
        let fis = learned_fis::<f64>();
        for x in [-1.0, 0.0, 0.02, 0.5, 30.0] {
            let alpha = fire_rules(x, &fis);
            let composed = aggregate(normalize_firing(alpha), rule_outputs(alpha, &fis));
            assert_eq!(infer(x, &fis).to_bits(), composed.to_bits());
        }
    }

    #[test]
    fn all_zero_firing_falls_back_to_maintain() {
        let mut fis = learned_fis::<f64>();
        fis.negative = SigmoidParams::new(50.0, 100.0);
        fis.positive = SigmoidParams::new(-50.0, -100.0);
        fis.zero = GaussParams::new(0.0, 0.01);
        let f = forward(5.0, &fis);
        assert!(f.fallback);
        assert_eq!(f.output, fis.maintain.c);
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(
            centroid_defuzzify(&[1.0, 2.0, 3.0], &[1.0, 0.0, 1.0]).unwrap(),
            2.0
        );
        assert_eq!(
            centroid_defuzzify(&[1.0, 5.0, 9.0], &[0.0, 0.4, 0.0]).unwrap(),
            5.0
        );
        let grid: Vec<f64> = (-50..=50).map(|i| 0.3 + f64::from(i) * 0.01).collect();
        let g = GaussParams::new(0.3, 0.1);
        let mu: Vec<f64> = grid.iter().map(|&x| gauss_mf(x, &g)).collect();
        assert_relative_eq!(
            centroid_defuzzify(&grid, &mu).unwrap(),
            0.3,
            epsilon = 1e-12
        );
        assert!(matches!(
            centroid_defuzzify(&[1.0, 2.0], &[0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(centroid_defuzzify::<f64>(&[], &[]).is_err());
        assert!(centroid_defuzzify(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn param_ids_round_trip() {
        let fis = learned_fis::<f64>();
        assert_eq!(FisParams::from_array(fis.to_array()), fis);
        for id in ParamId::ALL {
            assert_eq!(ParamId::from_key(id.key()), Some(id));
        }
    }

    fn arb_fis() -> impl Strategy<Value = FisParams<f64>> {
        proptest::array::uniform12(-5.0f64..5.0).prop_map(|mut v| {
            v[9] = v[9].abs() + 0.01;
            v[11] = v[11].abs() + 0.01;
            FisParams::from_array(v)
        })
    }

    proptest! {
        #[test]
        fn memberships_stay_in_unit_interval(x in -1e6f64..1e6, a in -50.0f64..50.0, b in -10.0f64..10.0, s in 0.0f64..5.0) {
            let sg = sigmoid_mf(x, &SigmoidParams::new(a, b));
            let gs = gauss_mf(x, &GaussParams::new(b, s));
            prop_assert!((0.0..=1.0).contains(&sg));
            prop_assert!((0.0..=1.0).contains(&gs));
        }

        #[test]
        fn normalized_firing_sums_to_one(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
            prop_assume!(a + b + c > 1e-9);
            let beta = normalize_firing([a, b, c]);
            prop_assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sigmoid_inverse_round_trips(alpha in 0.01f64..0.99, a in prop_oneof![-20.0f64..-0.05, 0.05f64..20.0], b in -10.0f64..10.0) {
            let p = SigmoidParams::new(a, b);
            prop_assert!((sigmoid_mf(sigmoid_inverse(alpha, &p), &p) - alpha).abs() < 1e-9);
        }

        #[test]
        fn aggregate_is_convex(w in proptest::array::uniform3(0.0f64..1.0), z in proptest::array::uniform3(-10.0f64..10.0)) {
            let beta = normalize_firing(w);
            let out = aggregate(beta, z);
            let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out >= lo - 1e-12 && out <= hi + 1e-12);
        }

        #[test]
        fn infer_is_deterministic_and_finite(fis in arb_fis(), x in -20.0f64..20.0) {
            let a = infer(x, &fis);
            prop_assert!(a.is_finite());
            prop_assert_eq!(a.to_bits(), infer(x, &fis).to_bits());
        }
    }
}
