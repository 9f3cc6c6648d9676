//! Training losses for ink-probability maps.
//!
//! Every loss takes predictions `yhat` (probabilities of ink) and a target `y`
//! in ink polarity (1 = ink). A target pixel is *positive* when its
//! white-background intensity `1 - y` is strictly below
//! [`LossConfig::pos_threshold`].
//!
//! * [`bdcn_loss`]: class-balanced cross-entropy. With `|Y+|` positives and
//!   `|Y-|` negatives out of `N` pixels, negatives are weighted by
//!   `alpha = lambda |Y+| / N` and positives by `beta = |Y-| / N`:
//!   `L1 = -alpha sum_{Y-} log(1 - yhat) - beta sum_{Y+} log(yhat)`.
//! * [`kde_loss`]: cross-entropy on positives weighted per pixel by `P_max`,
//!   the largest bin probability of a Gaussian kernel placed on that pixel's
//!   target intensity: `L2 = -sum_g P_max_g y_g log(yhat_g)`.
//! * [`combined_loss`]: `lambda1 L1 + lambda2 L2`.
//!
//! Predictions are clamped to `[epsilon, 1 - epsilon]` before taking logs;
//! gradients are evaluated at the clamped value and passed straight through
//! the clamp.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of positives over negatives in the class balance (`lambda`).
    pub lambda_bal: f64,
    /// White-background intensity below which a target pixel is ink.
    pub pos_threshold: f64,
    /// Number of histogram bins over `[0, 1]`.
    pub num_bins: usize,
    /// Kernel bandwidth.
    pub kde_sigma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Log clamp.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_bal: 1.1,
            pos_threshold: 0.5,
            num_bins: 10,
            kde_sigma: 0.05,
            lambda1: 0.8,
            lambda2: 0.2,
            epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_bal > 0.0) {
            return bad(format!("lambda_bal must be > 0, got {}", self.lambda_bal));
        }
        if !(0.0..=1.0).contains(&self.pos_threshold) {
            return bad(format!("pos_threshold must be in [0, 1], got {}", self.pos_threshold));
        }
        if self.num_bins < 2 {
            return bad(format!("num_bins must be >= 2, got {}", self.num_bins));
        }
        if !(self.kde_sigma > 0.0) {
            return bad(format!("kde_sigma must be > 0, got {}", self.kde_sigma));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0) {
            return bad(format!(
                "lambda1, lambda2 must be >= 0 with a positive sum, got {} and {}",
                self.lambda1, self.lambda2
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return bad(format!("epsilon must be in (0, 0.5), got {}", self.epsilon));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: FeatureMap,
}

/// Per-pixel `P_max` weights, same shape as the target.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelWeightField {
    pub weights: FeatureMap,
    /// Index of the winning bin for each pixel.
    pub bins: Vec<usize>,
}

/// Bin probabilities of the image-level kernel density estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinHistogram {
    pub probabilities: Vec<f64>,
}

impl BinHistogram {
    pub fn bin_width(&self) -> f64 {
        1.0 / self.probabilities.len() as f64
    }
}

fn check_shapes(yhat: &FeatureMap, y: &FeatureMap) -> Result<()> {
    if yhat.shape() != y.shape() {
        return Err(Error::arg(format!(
            "prediction shape {:?} does not match target {:?}",
            yhat.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Positive (ink) membership of each target pixel.
pub fn positive_mask(y: &FeatureMap, cfg: &LossConfig) -> Vec<bool> {
    y.data().iter().map(|&v| 1.0 - v < cfg.pos_threshold).collect()
}

/// `(alpha, beta)` class weights for negatives and positives.
pub fn class_balance_weights(y: &FeatureMap, cfg: &LossConfig) -> (f64, f64) {
    let n = y.data().len();
    let pos = positive_mask(y, cfg).iter().filter(|&&p| p).count();
    let neg = n - pos;
    let total = (pos + neg) as f64;
    (cfg.lambda_bal * pos as f64 / total, neg as f64 / total)
}

pub fn bdcn_loss(yhat: &FeatureMap, y: &FeatureMap, cfg: &LossConfig) -> Result<LossValue> {
    check_shapes(yhat, y)?;
    let (alpha, beta) = class_balance_weights(y, cfg);
    let eps = cfg.epsilon;
    let mask = positive_mask(y, cfg);
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(mask.len());
    for (&p, &positive) in yhat.data().iter().zip(&mask) {
        let p = p.clamp(eps, 1.0 - eps);
        if positive {
            value -= beta * p.ln();
            grad.push(-beta / p);
        } else {
            value -= alpha * (1.0 - p).ln();
            grad.push(alpha / (1.0 - p));
        }
    }
    let (c, h, w) = yhat.shape();
    Ok(LossValue {
        value,
        grad: FeatureMap::from_parts_unchecked(c, h, w, grad),
    })
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Gaussian kernel with the usual `1 / (sigma sqrt(2 pi))` normalizer.
pub fn gaussian_kernel(z: f64, sigma: f64) -> f64 {
    (-(z * z) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Kernel density estimate of a target's intensities.
#[derive(Clone, Debug)]
pub struct KdeDensity {
    samples: Vec<f64>,
    sigma: f64,
}

impl KdeDensity {
    pub fn eval(&self, g: f64) -> f64 {
        let sum: f64 = self
            .samples
            .iter()
            .map(|&v| gaussian_kernel(v - g, self.sigma))
            .sum();
        sum / self.samples.len() as f64
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

pub fn kde_density(y: &FeatureMap, sigma: f64) -> Result<KdeDensity> {
    if !(sigma > 0.0) {
        return Err(Error::arg(format!("kernel sigma must be > 0, got {sigma}")));
    }
    Ok(KdeDensity {
        samples: y.data().to_vec(),
        sigma,
    })
}

/// Kernel mass of a pixel at intensity `v` in each of `k` equal bins over
/// `[0, 1]`, before truncation.
fn raw_bin_masses(v: f64, k: usize, sigma: f64) -> Vec<f64> {
    let cdf: Vec<f64> = (0..=k)
        .map(|i| normal_cdf((i as f64 / k as f64 - v) / sigma))
        .collect();
    cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect()
}

/// Per-pixel bin distribution, renormalized to the mass inside `[0, 1]`.
pub fn pixel_bin_probabilities(v: f64, cfg: &LossConfig) -> Vec<f64> {
    let mut m = raw_bin_masses(v, cfg.num_bins, cfg.kde_sigma);
    let total: f64 = m.iter().sum();
    if total > 0.0 {
        m.iter_mut().for_each(|x| *x /= total);
    } else {
        // sigma so small that the in-range mass underflows; the pixel's own
        // bin gets everything
        let idx = ((v * cfg.num_bins as f64) as usize).min(cfg.num_bins - 1);
        m.fill(0.0);
        m[idx] = 1.0;
    }
    m
}

/// Image-level bin probabilities: closed-form kernel mass per bin, averaged
/// over pixels and renormalized to sum to one over `[0, 1]`.
pub fn bin_probabilities(y: &FeatureMap, cfg: &LossConfig) -> Result<BinHistogram> {
    cfg.validate()?;
    let mut acc = vec![0.0; cfg.num_bins];
    for &v in y.data() {
        for (a, m) in acc.iter_mut().zip(raw_bin_masses(v, cfg.num_bins, cfg.kde_sigma)) {
            *a += m;
        }
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        acc.iter_mut().for_each(|a| *a /= total);
    } else {
        acc.fill(1.0 / cfg.num_bins as f64);
    }
    Ok(BinHistogram {
        probabilities: acc,
    })
}

/// Relative margin by which a later bin must beat the current best to win;
/// absorbs rounding so exact ties go to the lower bin.
const TIE_TOLERANCE: f64 = 1e-12;

pub fn pmax_weights(y: &FeatureMap, cfg: &LossConfig) -> Result<PixelWeightField> {
    cfg.validate()?;
    let mut weights = Vec::with_capacity(y.data().len());
    let mut bins = Vec::with_capacity(y.data().len());
    for &v in y.data() {
        let probs = pixel_bin_probabilities(v, cfg);
        let (mut best, mut best_p) = (0, probs[0]);
        for (k, &p) in probs.iter().enumerate().skip(1) {
            if p > best_p + TIE_TOLERANCE * best_p.max(f64::MIN_POSITIVE) {
                best = k;
                best_p = p;
            }
        }
        weights.push(best_p.clamp(0.0, 1.0));
        bins.push(best);
    }
    let (c, h, w) = y.shape();
    Ok(PixelWeightField {
        weights: FeatureMap::from_parts_unchecked(c, h, w, weights),
        bins,
    })
}

pub fn kde_loss(
    yhat: &FeatureMap,
    y: &FeatureMap,
    weights: &PixelWeightField,
    cfg: &LossConfig,
) -> Result<LossValue> {
    check_shapes(yhat, y)?;
    check_shapes(yhat, &weights.weights)?;
    let eps = cfg.epsilon;
    let mask = positive_mask(y, cfg);
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(mask.len());
    for ((&p, &positive), &wgt) in yhat.data().iter().zip(&mask).zip(weights.weights.data()) {
        if positive {
            let p = p.clamp(eps, 1.0 - eps);
            value -= wgt * p.ln();
            grad.push(-wgt / p);
        } else {
            grad.push(0.0);
        }
    }
    let (c, h, w) = yhat.shape();
    Ok(LossValue {
        value,
        grad: FeatureMap::from_parts_unchecked(c, h, w, grad),
    })
}

pub fn combined_loss(yhat: &FeatureMap, y: &FeatureMap, cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    check_shapes(yhat, y)?;
    let l1 = bdcn_loss(yhat, y, cfg)?;
    let weights = pmax_weights(y, cfg)?;
    let l2 = kde_loss(yhat, y, &weights, cfg)?;
    let grad = l1
        .grad
        .data()
        .iter()
        .zip(l2.grad.data())
        .map(|(a, b)| cfg.lambda1 * a + cfg.lambda2 * b)
        .collect();
    let (c, h, w) = yhat.shape();
    Ok(LossValue {
        value: cfg.lambda1 * l1.value + cfg.lambda2 * l2.value,
        grad: FeatureMap::from_parts_unchecked(c, h, w, grad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, data: &[f64]) -> FeatureMap {
        FeatureMap::new(1, h, w, data.to_vec()).unwrap()
    }

    fn random_pair(seed: u64, n: usize) -> (FeatureMap, FeatureMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let yhat = (0..n * n).map(|_| rng.random_range(0.05..0.95)).collect::<Vec<_>>();
        // mostly background with some ink and a few gray pixels
        let y = (0..n * n)
            .map(|i| match i % 5 {
                0 => 1.0,
                1 => rng.random_range(0.0..1.0),
                _ => 0.0,
            })
            .collect::<Vec<_>>();
        (map(n, n, &yhat), map(n, n, &y))
    }

    /// Central-difference check of `f` against `grad` at `x`.
    fn fd_check(
        x: &FeatureMap,
        grad: &FeatureMap,
        eps: f64,
        rel: f64,
        f: impl Fn(&FeatureMap) -> f64,
    ) {
        for i in 0..x.data().len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            let an = grad.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
            assert!(err < rel || (fd - an).abs() < 1e-10, "pixel {i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn class_weights_hand_cases() {
        let cfg = LossConfig::default();
        // ink polarity: 0 is background
        assert_eq!(class_balance_weights(&map(2, 2, &[0.0; 4]), &cfg), (0.0, 1.0));
        let (a, b) = class_balance_weights(&map(2, 2, &[1.0, 0.0, 0.0, 0.0]), &cfg);
        assert!((a - 0.275).abs() < 1e-15);
        assert_eq!(b, 0.75);
        assert_eq!(class_balance_weights(&map(2, 2, &[1.0; 4]), &cfg), (1.1, 0.0));
    }

    #[test]
    fn threshold_is_strict_on_white_background_intensity() {
        let cfg = LossConfig::default();
        // 1 - 0.5 = 0.5 is not < 0.5
        assert_eq!(positive_mask(&map(1, 3, &[0.5, 0.6, 0.4]), &cfg), vec![false, true, false]);
    }

    #[test]
    fn bdcn_scalar_oracle() {
        let cfg = LossConfig::default();
        let y = map(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let yhat = map(2, 2, &[0.9, 0.1, 0.1, 0.1]);
        let expected = -0.275 * 3.0 * 0.9f64.ln() - 0.75 * 0.9f64.ln();
        let got = bdcn_loss(&yhat, &y, &cfg).unwrap().value;
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn bdcn_perfect_prediction_is_near_zero() {
        let cfg = LossConfig::default();
        let y = map(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let e = cfg.epsilon;
        let yhat = map(2, 2, &[1.0 - e, e, e, 1.0 - e]);
        let (a, b) = class_balance_weights(&y, &cfg);
        let bound = 4.0 * a.max(b) * -(1.0 - e).ln();
        let v = bdcn_loss(&yhat, &y, &cfg).unwrap().value;
        assert!(v >= 0.0 && v <= bound + 1e-18 && v < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = LossConfig::default();
        let a = FeatureMap::zeros(1, 2, 2);
        let b = FeatureMap::zeros(1, 2, 3);
        assert!(bdcn_loss(&a, &b, &cfg).is_err());
        assert!(combined_loss(&a, &b, &cfg).is_err());
    }

    #[test]
    fn bdcn_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        for seed in 0..5 {
            let (yhat, y) = random_pair(seed, 4);
            let g = bdcn_loss(&yhat, &y, &cfg).unwrap().grad;
            fd_check(&yhat, &g, 1e-6, 1e-6, |p| bdcn_loss(p, &y, &cfg).unwrap().value);
        }
    }

    #[test]
    fn kde_single_pixel_peak_and_symmetry() {
        let sigma = 0.1;
        let kde = kde_density(&map(1, 1, &[0.3]), sigma).unwrap();
        assert_eq!(kde.eval(0.3), 1.0 / (sigma * (2.0 * PI).sqrt()));
        for d in [0.01, 0.1, 0.25] {
            assert!((kde.eval(0.3 + d) - kde.eval(0.3 - d)).abs() < 1e-15);
        }
        assert!(kde_density(&map(1, 1, &[0.3]), 0.0).is_err());
    }

    #[test]
    fn kde_two_pixel_oracle() {
        let sigma = 0.2;
        let kde = kde_density(&map(1, 2, &[0.2, 0.8]), sigma).unwrap();
        // both pixels are 0.3 away from 0.5
        let k = (-0.09f64 / (2.0 * 0.04)).exp() / (0.2 * (2.0 * PI).sqrt());
        assert!((kde.eval(0.5) - k).abs() < 1e-12);
    }

    #[test]
    fn concentrated_pixels_fill_one_bin() {
        let cfg = LossConfig {
            kde_sigma: 0.01,
            ..LossConfig::default()
        };
        let hist = bin_probabilities(&map(2, 2, &[0.55; 4]), &cfg).unwrap();
        // 0.55 is the centre of bin 5; the erf oracle gives erf(0.05 / (0.01 sqrt 2))
        let oracle = libm::erf(0.05 / (0.01 * SQRT_2));
        assert!(hist.probabilities[5] >= 0.99);
        assert!((hist.probabilities[5] - oracle).abs() < 1e-12);

        let w = pmax_weights(&map(1, 1, &[0.55]), &cfg).unwrap();
        assert!(w.weights.data()[0] >= 0.99);
        assert_eq!(w.bins[0], 5);
    }

    #[test]
    fn pixel_at_half_has_most_mass_in_its_bins() {
        // 0.5 sits on a bin boundary, so its two neighbours split the mass
        let cfg = LossConfig {
            kde_sigma: 0.01,
            ..LossConfig::default()
        };
        let hist = bin_probabilities(&map(1, 1, &[0.5]), &cfg).unwrap();
        assert!((hist.probabilities[4] + hist.probabilities[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_tie_goes_to_lower_bin() {
        let cfg = LossConfig {
            kde_sigma: 0.03,
            ..LossConfig::default()
        };
        for (v, lower) in [(0.5, 4), (0.3, 2), (0.7, 6)] {
            let w = pmax_weights(&map(1, 1, &[v]), &cfg).unwrap();
            let probs = pixel_bin_probabilities(v, &cfg);
            assert_eq!(w.bins[0], lower, "v = {v}");
            assert!((probs[lower] - probs[lower + 1]).abs() < 1e-12);
            assert!((w.weights.data()[0] - probs[lower]).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_intensities_give_flat_histogram() {
        // Oracle: trapezoid integration of the density over each bin,
        // truncated to [0, 1] and renormalized.
        let n = 1000;
        let data: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let y = FeatureMap::new(1, 1, n, data).unwrap();
        let cfg = LossConfig {
            num_bins: 50,
            kde_sigma: 0.01,
            ..LossConfig::default()
        };
        let hist = bin_probabilities(&y, &cfg).unwrap();
        let kde = kde_density(&y, cfg.kde_sigma).unwrap();
        let steps = 200;
        let mut quad: Vec<f64> = (0..cfg.num_bins)
            .map(|k| {
                let a = k as f64 / cfg.num_bins as f64;
                let h = 1.0 / (cfg.num_bins * steps) as f64;
                (0..steps)
                    .map(|s| {
                        let x = a + s as f64 * h;
                        0.5 * h * (kde.eval(x) + kde.eval(x + h))
                    })
                    .sum()
            })
            .collect();
        let total: f64 = quad.iter().sum();
        quad.iter_mut().for_each(|q| *q /= total);
        for (a, b) in hist.probabilities.iter().zip(&quad) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let ratio = |p: &[f64]| {
            let max = p.iter().cloned().fold(0.0, f64::max);
            let min = p.iter().cloned().fold(1.0, f64::min);
            max / min
        };
        // edge bins lose the part of the kernel that falls outside [0, 1]
        assert!(ratio(&hist.probabilities) < 1.5);
        let k = cfg.num_bins;
        assert!(ratio(&hist.probabilities[1..k - 1]) < 1.01);
    }

    #[test]
    fn kde_loss_oracles() {
        let cfg = LossConfig::default();
        let y = map(1, 1, &[1.0]);
        let w = PixelWeightField {
            weights: map(1, 1, &[0.8]),
            bins: vec![9],
        };
        let v = kde_loss(&map(1, 1, &[0.5]), &y, &w, &cfg).unwrap();
        assert!((v.value - -0.8 * 0.5f64.ln()).abs() < 1e-15);
        assert!((v.grad.data()[0] - -0.8 / 0.5).abs() < 1e-15);

        let zeros = map(2, 2, &[0.0; 4]);
        let w = pmax_weights(&zeros, &cfg).unwrap();
        let v = kde_loss(&map(2, 2, &[0.3, 0.9, 0.01, 0.5]), &zeros, &w, &cfg).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.grad.data().iter().all(|&g| g == 0.0));

        let ink = map(1, 2, &[1.0, 1.0]);
        let w = pmax_weights(&ink, &cfg).unwrap();
        let e = cfg.epsilon;
        assert!(kde_loss(&map(1, 2, &[1.0 - e; 2]), &ink, &w, &cfg).unwrap().value < 1e-6);
    }

    #[test]
    fn combined_degenerates_to_bdcn() {
        let cfg = LossConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            ..LossConfig::default()
        };
        for seed in 0..4 {
            let (yhat, y) = random_pair(seed, 6);
            let c = combined_loss(&yhat, &y, &cfg).unwrap();
            let b = bdcn_loss(&yhat, &y, &cfg).unwrap();
            assert_eq!(c.value, b.value);
            assert_eq!(c.grad, b.grad);
        }
    }

    #[test]
    fn shipped_default_weights() {
        let cfg = LossConfig::default();
        assert_eq!((cfg.lambda1, cfg.lambda2), (0.8, 0.2));
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        for seed in 10..14 {
            let (yhat, y) = random_pair(seed, 4);
            let g = combined_loss(&yhat, &y, &cfg).unwrap().grad;
            fd_check(&yhat, &g, 1e-6, 1e-6, |p| combined_loss(p, &y, &cfg).unwrap().value);
        }
        for seed in 20..24 {
            let (yhat, y) = random_pair(seed, 8);
            let g = combined_loss(&yhat, &y, &cfg).unwrap().grad;
            fd_check(&yhat, &g, 1e-5, 1e-5, |p| combined_loss(p, &y, &cfg).unwrap().value);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { num_bins: 1, ..LossConfig::default() },
            LossConfig { kde_sigma: 0.0, ..LossConfig::default() },
            LossConfig { lambda1: 0.0, lambda2: 0.0, ..LossConfig::default() },
            LossConfig { lambda_bal: 0.0, ..LossConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn arb_pair(n: usize) -> impl Strategy<Value = (FeatureMap, FeatureMap)> {
        (
            proptest::collection::vec(0.0f64..=1.0, n * n),
            proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0], n * n),
        )
            .prop_map(move |(p, y)| (map(n, n, &p), map(n, n, &y)))
    }

    proptest! {
        #[test]
        fn losses_are_non_negative((yhat, y) in arb_pair(5)) {
            let cfg = LossConfig::default();
            let w = pmax_weights(&y, &cfg).unwrap();
            prop_assert!(bdcn_loss(&yhat, &y, &cfg).unwrap().value >= 0.0);
            prop_assert!(kde_loss(&yhat, &y, &w, &cfg).unwrap().value >= 0.0);
            prop_assert!(combined_loss(&yhat, &y, &cfg).unwrap().value >= 0.0);
        }

        #[test]
        fn histogram_sums_to_one((_, y) in arb_pair(6), k in 2usize..40, sigma in 0.005f64..0.5) {
            let cfg = LossConfig { num_bins: k, kde_sigma: sigma, ..LossConfig::default() };
            let h = bin_probabilities(&y, &cfg).unwrap();
            prop_assert!((h.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(h.probabilities.iter().all(|&p| p >= 0.0));
            let w = pmax_weights(&y, &cfg).unwrap();
            prop_assert!(w.weights.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn combined_is_linear_in_lambdas((yhat, y) in arb_pair(4), a in 0.1f64..10.0) {
            let base = LossConfig::default();
            let scaled = LossConfig { lambda1: a * base.lambda1, lambda2: a * base.lambda2, ..base.clone() };
            let l = combined_loss(&yhat, &y, &base).unwrap().value;
            let ls = combined_loss(&yhat, &y, &scaled).unwrap().value;
            prop_assert!((ls - a * l).abs() <= 1e-12 * ls.abs().max(1.0));
        }

        #[test]
        fn lowering_a_positive_prediction_raises_both_losses(
            (yhat, y) in arb_pair(4),
            pos in 0usize..16,
            neg in 0usize..16,
            drop in 0.01f64..0.5,
        ) {
            prop_assume!(pos != neg);
            let cfg = LossConfig::default();
            let mut y = y.clone();
            y.data_mut()[pos] = 1.0;
            // beta = |Y-| / N needs at least one negative to be non-zero
            y.data_mut()[neg] = 0.0;
            let mut yhat = yhat.clone();
            yhat.data_mut()[pos] = yhat.data()[pos].clamp(0.52, 0.99);
            let mut lower = yhat.clone();
            lower.data_mut()[pos] -= drop;
            let w = pmax_weights(&y, &cfg).unwrap();
            prop_assert!(bdcn_loss(&lower, &y, &cfg).unwrap().value > bdcn_loss(&yhat, &y, &cfg).unwrap().value);
            prop_assert!(kde_loss(&lower, &y, &w, &cfg).unwrap().value > kde_loss(&yhat, &y, &w, &cfg).unwrap().value);
        }
    }
}
