//! Post-hoc calibration baselines: temperature application, global
//! temperature fitting by NLL minimization, logit ensembling, and a
//! pixel-level mixup-based calibrator that needs no target labels.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::metrics::{LabelMap, ProbMap, IGNORE};
use crate::models::{SegNet, TemperatureMap, TEMP_CEIL, TEMP_FLOOR};

/// A single positive temperature shared by all pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTemperature {
    pub value: f64,
}

impl GlobalTemperature {
    pub fn new(value: f64) -> Result<Self> {
        if value <= 0.0 || !value.is_finite() {
            return Err(Error::Domain(format!("temperature {value} must be positive")));
        }
        Ok(GlobalTemperature { value })
    }
}

/// Scalar or per-pixel divisor for logits.
#[derive(Debug, Clone)]
pub enum Temperature {
    Global(f64),
    PerPixel(TemperatureMap),
}

/// Per-pixel softmax of `logits / T`. `logits` are `[H, W, C]`.
pub fn apply_temperature(logits: &Array3<f64>, t: &Temperature) -> Result<ProbMap> {
    let (h, w, _c) = logits.dim();
    let scaled = match t {
        Temperature::Global(v) => {
            if *v <= 0.0 || !v.is_finite() {
                return Err(Error::Domain(format!("temperature {v} must be positive")));
            }
            logits.mapv(|z| z / v)
        }
        Temperature::PerPixel(map) => {
            if map.values().dim() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "temperature map {:?} vs logits {}x{}",
                    map.values().dim(),
                    h,
                    w
                )));
            }
            let mut out = logits.clone();
            for ((i, j, _), z) in out.indexed_iter_mut() {
                *z /= map.values()[[i, j]];
            }
            out
        }
    };
    Ok(ProbMap::from_logits(&scaled))
}

/// Mean NLL of `softmax(z / t)` over flattened (logit-row, label) pairs.
fn pooled_nll(rows: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let mut sum = 0.0;
    for (z, &y) in rows.iter().zip(labels) {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
        let lse = z.iter().map(|&v| (v / t - m).exp()).sum::<f64>().ln() + m;
        sum -= z[y] / t - lse;
    }
    sum / rows.len() as f64
}

/// Fit the temperature minimizing pooled NLL over all non-ignored pixels.
///
/// Golden-section search over `ln T` in `[ln TEMP_FLOOR, ln TEMP_CEIL]`,
/// terminated when the bracket is narrower than 1e-4 in temperature space.
pub fn fit_global_temperature(
    logits: &[Array3<f64>],
    labels: &[LabelMap],
) -> Result<GlobalTemperature> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit maps vs {} label maps",
            logits.len(),
            labels.len()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<usize> = Vec::new();
    for (z, l) in logits.iter().zip(labels) {
        let (h, w, c) = z.dim();
        if (h, w) != l.shape() {
            return Err(Error::ShapeMismatch(format!(
                "logits {h}x{w} vs labels {:?}",
                l.shape()
            )));
        }
        for (i, j, y) in l.non_ignored() {
            rows.push((0..c).map(|k| z[[i, j, k]]).collect());
            ys.push(y as usize);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptySample("no labeled pixels to fit on".into()));
    }

    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = TEMP_FLOOR.ln();
    let mut b = TEMP_CEIL.ln();
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = pooled_nll(&rows, &ys, x1.exp());
    let mut f2 = pooled_nll(&rows, &ys, x2.exp());
    while b.exp() - a.exp() > 1e-4 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = pooled_nll(&rows, &ys, x1.exp());
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = pooled_nll(&rows, &ys, x2.exp());
        }
    }
    GlobalTemperature::new(((a + b) / 2.0).exp())
}

/// Arithmetic mean of member logits followed by softmax.
pub fn ensemble_probs(logit_sets: &[Array3<f64>]) -> Result<ProbMap> {
    let first = logit_sets
        .first()
        .ok_or_else(|| Error::InsufficientData("ensemble needs at least one member".into()))?;
    let mut mean = first.clone();
    for z in &logit_sets[1..] {
        if z.dim() != first.dim() {
            return Err(Error::ShapeMismatch(format!(
                "ensemble member {:?} vs {:?}",
                z.dim(),
                first.dim()
            )));
        }
        mean += z;
    }
    mean /= logit_sets.len() as f64;
    Ok(ProbMap::from_logits(&mean))
}

/// Anything that maps an image `[3, H, W]` to per-pixel logits `[H, W, C]`.
pub trait PixelPredictor {
    fn predict_logits(&self, image: &Array3<f64>) -> Array3<f64>;
}

impl PixelPredictor for SegNet {
    fn predict_logits(&self, image: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = image.dim();
        let batch = image
            .clone()
            .into_shape_with_order(ndarray::IxDyn(&[1, c, h, w]))
            .unwrap();
        let logits = self.logits(&batch);
        crate::models::logits_to_hwc(&logits, 0)
    }
}

fn hard_prediction(logits: &Array3<f64>) -> LabelMap {
    let (h, w, c) = logits.dim();
    let mut out = ndarray::Array2::from_elem((h, w), 0u8);
    for i in 0..h {
        for j in 0..w {
            let mut best = 0usize;
            let mut best_v = logits[[i, j, 0]];
            for k in 1..c {
                if logits[[i, j, k]] > best_v {
                    best_v = logits[[i, j, k]];
                    best = k;
                }
            }
            out[[i, j]] = best as u8;
        }
    }
    LabelMap(out)
}

/// Pixel-level mixup calibration on unlabeled target images.
///
/// Images are paired without replacement; each pair is blended with
/// `lambda ~ Beta(0.3, 0.3)`. The hard pseudo-label comes from the model's
/// prediction on the pair's dominant original image, the logits from the
/// model's output on the blend, and a global temperature is fitted on the
/// pooled pairs.
pub fn pseudocal_fit(
    teacher: &dyn PixelPredictor,
    target_images: &[Array3<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<GlobalTemperature> {
    if target_images.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "mixup calibration needs at least 2 images, got {}",
            target_images.len()
        )));
    }
    let beta = Beta::new(0.3, 0.3).expect("valid Beta parameters");
    let mut order: Vec<usize> = (0..target_images.len()).collect();
    order.shuffle(rng);

    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for pair in order.chunks_exact(2) {
        let lambda: f64 = beta.sample(rng);
        let (a, b) = (&target_images[pair[0]], &target_images[pair[1]]);
        let mixed = mixup(a, b, lambda);
        let dominant = if lambda >= 0.5 { a } else { b };
        labels.push(hard_prediction(&teacher.predict_logits(dominant)));
        logits.push(teacher.predict_logits(&mixed));
    }
    fit_global_temperature(&logits, &labels)
}

/// `lambda * a + (1 - lambda) * b`, pixel-wise.
pub fn mixup(a: &Array3<f64>, b: &Array3<f64>, lambda: f64) -> Array3<f64> {
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| *x = lambda * *x + (1.0 - lambda) * y);
    out
}

/// Small versioned record of a fitted temperature.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TemperatureRecord {
    pub version: u32,
    pub method: String,
    pub temperature: f64,
    pub fit_fingerprint: String,
    pub seed: u64,
}

impl TemperatureRecord {
    pub fn new(method: &str, t: GlobalTemperature, fingerprint: &str, seed: u64) -> Self {
        TemperatureRecord {
            version: 1,
            method: method.to_string(),
            temperature: t.value,
            fit_fingerprint: fingerprint.to_string(),
            seed,
        }
    }
}

/// Draw labels from the softmax of each logit row: the label process of a
/// perfectly calibrated predictor. Test and benchmark helper.
pub fn sample_labels_from_softmax(logits: &Array3<f64>, rng: &mut ChaCha8Rng) -> LabelMap {
    let (h, w, c) = logits.dim();
    let mut out = ndarray::Array2::from_elem((h, w), IGNORE);
    for i in 0..h {
        for j in 0..w {
            let m = (0..c).map(|k| logits[[i, j, k]]).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = (0..c).map(|k| (logits[[i, j, k]] - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut y = c - 1;
            for (k, e) in exps.iter().enumerate() {
                acc += e;
                if u < acc {
                    y = k;
                    break;
                }
            }
            out[[i, j]] = y as u8;
        }
    }
    LabelMap(out)
}
