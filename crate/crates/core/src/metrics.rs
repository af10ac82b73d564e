//! Class-balanced calibration metrics for segmentation: ECE, NLL, Brier
//! score, reliability-diagram binning, pixel sampling and mIoU.
//!
//! Segmentation suffers from severe class-pixel imbalance, so each metric is
//! computed per true class over sampled pixels and then averaged with equal
//! class weights. All operations are pure functions of their inputs plus an
//! explicitly passed RNG.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sentinel label for pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Probability floor applied inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-pixel class probabilities, `[H, W, C]`; each pixel sums to one.
#[derive(Debug, Clone)]
pub struct ProbMap(pub Array3<f64>);

impl ProbMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        for px in values.rows() {
            let mut sum = 0.0;
            for &p in px {
                if p < 0.0 {
                    return Err(Error::Domain("negative probability".into()));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!("pixel probabilities sum to {sum}")));
            }
        }
        Ok(ProbMap(values))
    }

    /// Softmax of per-pixel logit rows.
    pub fn from_logits(logits: &Array3<f64>) -> Self {
        let mut out = logits.clone();
        for mut px in out.rows_mut() {
            let m = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for p in px.iter_mut() {
                *p = (*p - m).exp();
                sum += *p;
            }
            for p in px.iter_mut() {
                *p /= sum;
            }
        }
        ProbMap(out)
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[2]
    }

    /// Winning class with ties broken toward the lowest class index.
    pub fn argmax(&self, i: usize, j: usize) -> usize {
        let mut best = 0;
        let mut best_p = self.0[[i, j, 0]];
        for c in 1..self.classes() {
            let p = self.0[[i, j, c]];
            if p > best_p {
                best_p = p;
                best = c;
            }
        }
        best
    }

    pub fn confidence(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j, self.argmax(i, j)]]
    }
}

/// Per-pixel integer labels in `[0, C)` with `IGNORE` holes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap(pub Array2<u8>);

impl LabelMap {
    pub fn new(values: Array2<u8>, classes: usize) -> Result<Self> {
        if values.iter().any(|&v| v != IGNORE && v as usize >= classes) {
            return Err(Error::Domain(format!("label out of range for C={classes}")));
        }
        Ok(LabelMap(values))
    }

    pub fn shape(&self) -> (usize, usize) {
        let s = self.0.shape();
        (s[0], s[1])
    }

    pub fn non_ignored(&self) -> impl Iterator<Item = (usize, usize, u8)> + '_ {
        self.0
            .indexed_iter()
            .filter(|(_, &v)| v != IGNORE)
            .map(|((i, j), &v)| (i, j, v))
    }
}

/// One sampled pixel: the model's top confidence, its predicted class and
/// the true class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub confidence: f64,
    pub predicted: usize,
    pub actual: usize,
}

/// Binned (confidence, correctness) aggregates behind ECE and reliability
/// diagrams. Equal-width bins over `[0, 1]`; confidence 1.0 clamps into the
/// top bin.
#[derive(Debug, Clone)]
pub struct ReliabilityBins {
    pub edges: Vec<f64>,
    pub count: Vec<u64>,
    pub conf_sum: Vec<f64>,
    pub acc_sum: Vec<f64>,
}

impl ReliabilityBins {
    pub fn bins(&self) -> usize {
        self.count.len()
    }

    pub fn total(&self) -> u64 {
        self.count.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct ClassMetrics {
    pub class: usize,
    pub n_pixels: usize,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
}

/// Class-balanced calibration report plus segmentation quality.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_ece: f64,
    pub macro_nll: f64,
    pub macro_brier: f64,
    pub miou: f64,
}

fn check_shapes(probs: &ProbMap, labels: &LabelMap) -> Result<()> {
    if (probs.height(), probs.width()) != labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {}x{} vs labels {:?}",
            probs.height(),
            probs.width(),
            labels.shape()
        )));
    }
    Ok(())
}

/// Indices of `min(n, available)` non-ignored pixels drawn uniformly without
/// replacement (partial Fisher–Yates; bit-reproducible for a fixed seed).
pub fn sample_pixel_indices(
    labels: &LabelMap,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    assert!(n >= 1, "sample size must be positive");
    let mut pool: Vec<(usize, usize)> = labels.non_ignored().map(|(i, j, _)| (i, j)).collect();
    if pool.is_empty() {
        return Err(Error::EmptySample("all pixels ignored".into()));
    }
    let take = n.min(pool.len());
    for k in 0..take {
        let pick = k + rng.random_range(0..pool.len() - k);
        pool.swap(k, pick);
    }
    pool.truncate(take);
    Ok(pool)
}

/// Sample pixels and report (confidence, predicted, actual) triples.
pub fn sample_pixels(
    probs: &ProbMap,
    labels: &LabelMap,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PixelSample>> {
    check_shapes(probs, labels)?;
    let idx = sample_pixel_indices(labels, n, rng)?;
    Ok(idx
        .into_iter()
        .map(|(i, j)| PixelSample {
            confidence: probs.confidence(i, j),
            predicted: probs.argmax(i, j),
            actual: labels.0[[i, j]] as usize,
        })
        .collect())
}

/// Accumulate (confidence, correctness) pairs into `m` equal-width bins.
pub fn bin_samples(samples: &[(f64, bool)], m: usize) -> Result<ReliabilityBins> {
    assert!(m >= 1, "bin count must be positive");
    let mut bins = ReliabilityBins {
        edges: (0..=m).map(|i| i as f64 / m as f64).collect(),
        count: vec![0; m],
        conf_sum: vec![0.0; m],
        acc_sum: vec![0.0; m],
    };
    for &(conf, correct) in samples {
        if !(0.0..=1.0).contains(&conf) {
            return Err(Error::Domain(format!("confidence {conf} outside [0,1]")));
        }
        let b = ((conf * m as f64) as usize).min(m - 1);
        bins.count[b] += 1;
        bins.conf_sum[b] += conf;
        if correct {
            bins.acc_sum[b] += 1.0;
        }
    }
    Ok(bins)
}

/// Expected calibration error: bin-weighted mean |accuracy − confidence|.
pub fn ece(bins: &ReliabilityBins) -> Result<f64> {
    let total = bins.total();
    if total == 0 {
        return Err(Error::EmptySample("no samples in bins".into()));
    }
    let mut out = 0.0;
    for b in 0..bins.bins() {
        if bins.count[b] == 0 {
            continue;
        }
        let n = bins.count[b] as f64;
        out += n / total as f64 * (bins.acc_sum[b] / n - bins.conf_sum[b] / n).abs();
    }
    Ok(out)
}

/// Mean negative log-likelihood over non-ignored pixels.
pub fn nll(probs: &ProbMap, labels: &LabelMap) -> Result<f64> {
    check_shapes(probs, labels)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, j, y) in labels.non_ignored() {
        sum -= probs.0[[i, j, y as usize]].max(PROB_FLOOR).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySample("all pixels ignored".into()));
    }
    Ok(sum / n as f64)
}

/// Mean squared error between probability rows and one-hot labels.
pub fn brier(probs: &ProbMap, labels: &LabelMap) -> Result<f64> {
    check_shapes(probs, labels)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, j, y) in labels.non_ignored() {
        let mut px = 0.0;
        for c in 0..probs.classes() {
            let p = probs.0[[i, j, c]];
            let t = if c == y as usize { 1.0 } else { 0.0 };
            px += (p - t) * (p - t);
        }
        sum += px;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySample("all pixels ignored".into()));
    }
    Ok(sum / n as f64)
}

/// Mean IoU over classes present in the ground truth, sentinel pixels
/// excluded, predictions by argmax.
pub fn mean_iou(probs: &[ProbMap], labels: &[LabelMap], classes: usize) -> Result<f64> {
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fnn = vec![0u64; classes];
    let mut present = vec![false; classes];
    for (p, l) in probs.iter().zip(labels) {
        check_shapes(p, l)?;
        for (i, j, y) in l.non_ignored() {
            let y = y as usize;
            let pred = p.argmax(i, j);
            present[y] = true;
            if pred == y {
                tp[y] += 1;
            } else {
                fp[pred] += 1;
                fnn[y] += 1;
            }
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..classes {
        if !present[c] {
            continue;
        }
        let denom = tp[c] + fp[c] + fnn[c];
        sum += tp[c] as f64 / denom as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySample("no labeled pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Compute ECE, NLL and Brier per true class over pixels sampled per image
/// (one shared sample for all three metrics), pooled across the batch, plus
/// the unweighted class means and mIoU.
pub fn class_balanced_report(
    probs: &[ProbMap],
    labels: &[LabelMap],
    classes: usize,
    m_bins: usize,
    n_per_image: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CalibrationReport> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} probability maps vs {} label maps",
            probs.len(),
            labels.len()
        )));
    }

    // Pooled per-class accumulators; brier uses sum p^2 - 2 p_y + 1.
    let mut conf_correct: Vec<Vec<(f64, bool)>> = vec![Vec::new(); classes];
    let mut nll_sum = vec![0.0f64; classes];
    let mut brier_sum = vec![0.0f64; classes];
    let mut counts = vec![0usize; classes];

    let mut sampled_any = false;
    for (p, l) in probs.iter().zip(labels) {
        check_shapes(p, l)?;
        let idx = match sample_pixel_indices(l, n_per_image, rng) {
            Ok(idx) => idx,
            Err(Error::EmptySample(_)) => continue,
            Err(e) => return Err(e),
        };
        sampled_any = true;
        for (i, j) in idx {
            let y = l.0[[i, j]] as usize;
            let p_y = p.0[[i, j, y]];
            let sumsq: f64 = (0..classes).map(|c| p.0[[i, j, c]] * p.0[[i, j, c]]).sum();
            conf_correct[y].push((p.confidence(i, j), p.argmax(i, j) == y));
            nll_sum[y] -= p_y.max(PROB_FLOOR).ln();
            brier_sum[y] += sumsq - 2.0 * p_y + 1.0;
            counts[y] += 1;
        }
    }
    if !sampled_any {
        return Err(Error::EmptySample("no non-ignored pixels in the batch".into()));
    }

    let mut per_class = Vec::new();
    let (mut e_acc, mut n_acc, mut b_acc) = (0.0, 0.0, 0.0);
    let mut n_classes = 0usize;
    for c in 0..classes {
        if counts[c] == 0 {
            continue;
        }
        let bins = bin_samples(&conf_correct[c], m_bins)?;
        let cm = ClassMetrics {
            class: c,
            n_pixels: counts[c],
            ece: ece(&bins)?,
            nll: nll_sum[c] / counts[c] as f64,
            brier: brier_sum[c] / counts[c] as f64,
        };
        e_acc += cm.ece;
        n_acc += cm.nll;
        b_acc += cm.brier;
        n_classes += 1;
        per_class.push(cm);
    }

    Ok(CalibrationReport {
        per_class,
        macro_ece: e_acc / n_classes as f64,
        macro_nll: n_acc / n_classes as f64,
        macro_brier: b_acc / n_classes as f64,
        miou: mean_iou(probs, labels, classes)?,
    })
}

/// One reliability-diagram row; `accuracy` and `mean_confidence` are absent
/// for empty bins.
#[derive(Debug, Clone)]
pub struct BinRow {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Tabular export of reliability bins, one row per bin.
pub fn reliability_diagram_export(bins: &ReliabilityBins) -> Vec<BinRow> {
    (0..bins.bins())
        .map(|b| {
            let n = bins.count[b];
            BinRow {
                lower: bins.edges[b],
                upper: bins.edges[b + 1],
                count: n,
                mean_confidence: (n > 0).then(|| bins.conf_sum[b] / n as f64),
                accuracy: (n > 0).then(|| bins.acc_sum[b] / n as f64),
            }
        })
        .collect()
}

/// CSV with columns (class, n_pixels, ece, nll, brier) plus a macro row.
pub fn report_to_csv(report: &CalibrationReport) -> String {
    let mut out = String::from("class,n_pixels,ece,nll,brier\n");
    for cm in &report.per_class {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            cm.class, cm.n_pixels, cm.ece, cm.nll, cm.brier
        ));
    }
    let total: usize = report.per_class.iter().map(|c| c.n_pixels).sum();
    out.push_str(&format!(
        "macro,{},{},{},{}\n",
        total, report.macro_ece, report.macro_nll, report.macro_brier
    ));
    out
}

/// CSV with one row per bin; empty bins leave confidence/accuracy blank.
pub fn bins_to_csv(bins: &ReliabilityBins) -> String {
    let mut out = String::from("lower,upper,count,mean_confidence,accuracy\n");
    for row in reliability_diagram_export(bins) {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.lower,
            row.upper,
            row.count,
            row.mean_confidence.map(|v| v.to_string()).unwrap_or_default(),
            row.accuracy.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    out
}
