//! Image quality metrics on white-background rasters with unit dynamic range.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::loss::{bdcn_loss, LossConfig};
use crate::model::FeatureMap;
use crate::raster::SketchRaster;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub l1: f64,
    pub bdcn_loss: f64,
    /// `+inf` when the rasters are identical; written as `null` in JSON.
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub n_pairs: usize,
    /// Pairs whose PSNR was infinite and therefore left out of the PSNR mean.
    #[serde(default)]
    pub psnr_infinite: usize,
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

fn check_shapes(a: &SketchRaster, b: &SketchRaster) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::arg(format!(
            "raster shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn mean_of(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

pub fn mse(a: &SketchRaster, b: &SketchRaster) -> Result<f64> {
    check_shapes(a, b)?;
    let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y));
    Ok(mean_of(d, a.len()))
}

pub fn l1(a: &SketchRaster, b: &SketchRaster) -> Result<f64> {
    check_shapes(a, b)?;
    let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs());
    Ok(mean_of(d, a.len()))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &SketchRaster, b: &SketchRaster) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn ssim_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter keeping only fully covered window positions.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * ow + x])
                .sum();
        }
    }
    (out, oh, ow)
}

pub fn ssim(a: &SketchRaster, b: &SketchRaster) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = ssim_window();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<_>>();
    let (mu_x, _, _) = filter_valid(x, h, w, &k);
    let (mu_y, _, _) = filter_valid(y, h, w, &k);
    let (xx, _, _) = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
    let (yy, _, _) = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
    let (xy, oh, ow) = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
    let total: f64 = (0..oh * ow)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / (oh * ow) as f64)
}

/// Class-balanced cross-entropy of a cleaned raster against its target.
pub fn bdcn_metric(pred: &SketchRaster, truth: &SketchRaster, cfg: &LossConfig) -> Result<f64> {
    check_shapes(pred, truth)?;
    let yhat = FeatureMap::from_raster_ink(pred);
    let y = FeatureMap::from_raster_ink(truth);
    Ok(bdcn_loss(&yhat, &y, cfg)?.value)
}

/// All five metrics for one prediction/target pair.
pub fn pair_report(pred: &SketchRaster, truth: &SketchRaster, cfg: &LossConfig) -> Result<MetricReport> {
    let mse = mse(pred, truth)?;
    Ok(MetricReport {
        mse,
        l1: l1(pred, truth)?,
        bdcn_loss: bdcn_metric(pred, truth, cfg)?,
        psnr: psnr_from_mse(mse),
        ssim: ssim(pred, truth)?,
        n_pairs: 1,
        psnr_infinite: usize::from(mse == 0.0),
    })
}

/// Sorting before summing makes the mean independent of list order.
fn ordered_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    v.into_iter().sum::<f64>() / n as f64
}

/// Per-metric means, weighting each report by its pair count.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::arg("cannot aggregate an empty list of reports"));
    }
    if reports.len() == 1 {
        return Ok(reports[0].clone());
    }
    let pairs = |r: &MetricReport| r.n_pairs.max(1);
    let field = |f: fn(&MetricReport) -> f64| {
        let v: Vec<f64> = reports
            .iter()
            .flat_map(|r| std::iter::repeat_n(f(r), pairs(r)))
            .collect();
        ordered_mean(v)
    };
    let infinite = |r: &MetricReport| {
        if r.psnr.is_finite() {
            r.psnr_infinite.min(pairs(r))
        } else {
            pairs(r)
        }
    };
    let finite: Vec<f64> = reports
        .iter()
        .flat_map(|r| std::iter::repeat_n(r.psnr, pairs(r) - infinite(r)))
        .collect();
    let psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        ordered_mean(finite)
    };
    Ok(MetricReport {
        mse: field(|r| r.mse),
        l1: field(|r| r.l1),
        bdcn_loss: field(|r| r.bdcn_loss),
        psnr,
        ssim: field(|r| r.ssim),
        n_pairs: reports.iter().map(pairs).sum(),
        psnr_infinite: reports.iter().map(infinite).sum(),
    })
}

/// Per-pair CSV: `id,mse,l1,bdcn_loss,psnr,ssim`.
pub fn metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("id,mse,l1,bdcn_loss,psnr,ssim\n");
    for (id, r) in rows {
        let psnr = if r.psnr.is_finite() {
            r.psnr.to_string()
        } else {
            "inf".to_string()
        };
        let _ = writeln!(out, "{id},{},{},{},{psnr},{}", r.mse, r.l1, r.bdcn_loss, r.ssim);
    }
    out
}

pub fn write_metrics_csv(rows: &[(String, MetricReport)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn write_summary_json(summary: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize) -> SketchRaster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SketchRaster::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
    }

    fn shifted(r: &SketchRaster, d: f64) -> SketchRaster {
        SketchRaster::new(r.height(), r.width(), r.data().iter().map(|v| v + d).collect()).unwrap()
    }

    #[test]
    fn identical_rasters() {
        let a = random(1, 16, 16);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let r = pair_report(&a, &a, &LossConfig::default()).unwrap();
        assert_eq!(r.psnr_infinite, 1);
    }

    #[test]
    fn constant_difference() {
        let a = SketchRaster::filled(12, 12, 0.5).unwrap();
        let b = SketchRaster::filled(12, 12, 0.6).unwrap();
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!((l1(&a, &b).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn psnr_identity() {
        assert_eq!(psnr_from_mse(0.01), 20.0);
        for m in [0.01, 0.0025] {
            assert_eq!(psnr_from_mse(m), -10.0 * f64::log10(m));
        }
    }

    #[test]
    fn shape_errors() {
        let a = random(1, 12, 12);
        let b = random(1, 12, 13);
        assert!(mse(&a, &b).is_err());
        assert!(l1(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
        assert!(bdcn_metric(&a, &b, &LossConfig::default()).is_err());
        let small = random(1, 10, 12);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        for seed in 0..10 {
            let a = random(seed, 16, 20);
            let b = random(seed + 100, 16, 20);
            let s = ssim(&a, &b).unwrap();
            assert_eq!(s, ssim(&b, &a).unwrap());
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn ssim_brute_force_oracle() {
        // direct 2D windowed sums at every valid position
        let a = random(3, 13, 14);
        let b = random(4, 13, 14);
        let k = ssim_window();
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=13 - 11 {
            for ox in 0..=14 - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = k[i] * k[j];
                        let x = a.get(oy + i, ox + j);
                        let y = b.get(oy + i, ox + j);
                        mx += wgt * x;
                        my += wgt * y;
                        xx += wgt * x * x;
                        yy += wgt * y * y;
                        xy += wgt * x * y;
                    }
                }
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * (xy - mx * my) + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (xx - mx * mx + yy - my * my + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let a = random(9, 24, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noisy = |amp: f64, rng: &mut ChaCha8Rng| {
            SketchRaster::from_clamped(
                24,
                24,
                a.data().iter().map(|v| v + rng.random_range(-amp..amp)).collect(),
            )
            .unwrap()
        };
        let s1 = ssim(&a, &noisy(0.05, &mut rng)).unwrap();
        let s2 = ssim(&a, &noisy(0.4, &mut rng)).unwrap();
        assert!(1.0 > s1 && s1 > s2);
    }

    #[test]
    fn bdcn_metric_delegates_exactly() {
        let cfg = LossConfig::default();
        for seed in 0..5 {
            let a = random(seed, 8, 8);
            let b = random(seed + 50, 8, 8);
            let direct = bdcn_loss(
                &FeatureMap::from_raster_ink(&a),
                &FeatureMap::from_raster_ink(&b),
                &cfg,
            )
            .unwrap()
            .value;
            assert_eq!(bdcn_metric(&a, &b, &cfg).unwrap(), direct);
        }
        let t = SketchRaster::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(bdcn_metric(&t, &t, &cfg).unwrap() < 1e-6);
    }

    fn report(mse: f64, psnr: f64) -> MetricReport {
        MetricReport {
            mse,
            l1: mse.sqrt(),
            bdcn_loss: 0.5,
            psnr,
            ssim: 0.9,
            n_pairs: 1,
            psnr_infinite: usize::from(psnr.is_infinite()),
        }
    }

    #[test]
    fn aggregation() {
        assert!(aggregate(&[]).is_err());
        let one = report(0.01, 20.0);
        assert_eq!(aggregate(std::slice::from_ref(&one)).unwrap(), one);

        let agg = aggregate(&[report(0.01, 20.0), report(0.03, 15.0)]).unwrap();
        assert!((agg.mse - 0.02).abs() < 1e-15);
        assert_eq!(agg.n_pairs, 2);

        let with_inf = aggregate(&[report(0.01, 20.0), report(0.0, f64::INFINITY)]).unwrap();
        assert_eq!(with_inf.psnr, 20.0);
        assert_eq!(with_inf.psnr_infinite, 1);
        assert_eq!(with_inf.n_pairs, 2);
    }

    #[test]
    fn aggregation_ignores_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reps: Vec<_> = (0..30)
            .map(|_| {
                let m = rng.random_range(0.0001..0.2);
                report(m, psnr_from_mse(m))
            })
            .collect();
        let a = aggregate(&reps).unwrap();
        reps.reverse();
        reps.swap(3, 17);
        assert_eq!(aggregate(&reps).unwrap(), a);
    }

    #[test]
    fn json_round_trip_with_infinite_psnr() {
        let r = report(0.0, f64::INFINITY);
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"psnr\":null"));
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_layout() {
        let csv = metrics_csv(&[("00001".into(), report(0.01, 20.0)), ("x".into(), report(0.0, f64::INFINITY))]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "id,mse,l1,bdcn_loss,psnr,ssim");
        assert!(lines[1].starts_with("00001,0.01,0.1,0.5,20,"));
        assert!(lines[2].contains(",inf,"));
    }

    proptest! {
        #[test]
        fn flip_invariance_and_bounds(seed in 0u64..1000) {
            let cfg = LossConfig::default();
            let a = random(seed, 12, 15);
            let b = random(seed ^ 0xabc, 12, 15);
            let r = pair_report(&a, &b, &cfg).unwrap();
            let rf = pair_report(&a.flip_horizontal(), &b.flip_horizontal(), &cfg).unwrap();
            prop_assert!((r.mse - rf.mse).abs() < 1e-12);
            prop_assert!((r.l1 - rf.l1).abs() < 1e-12);
            prop_assert!((r.bdcn_loss - rf.bdcn_loss).abs() < 1e-9);
            prop_assert!((r.ssim - rf.ssim).abs() < 1e-9);
            let max_abs = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(r.l1 <= max_abs + 1e-15);
            prop_assert!(r.mse <= max_abs * max_abs + 1e-15);
            prop_assert!((-1.0..=1.0).contains(&r.ssim));
        }

        #[test]
        fn shift_oracle(d in 0.0f64..0.3) {
            let a = SketchRaster::filled(12, 12, 0.2).unwrap();
            let b = shifted(&a, d);
            prop_assert!((mse(&a, &b).unwrap() - d * d).abs() < 1e-12);
        }
    }
}
