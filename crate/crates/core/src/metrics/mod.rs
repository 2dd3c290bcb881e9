//! Evaluation-side metrics: generalized energy distance over prediction and
//! annotation sets, the Dice family (soft-thresholded, best-case, optimally
//! matched, per-rater), calibration (ECE, Brier), predictive-entropy
//! analyses, and stratification helpers.
//!
//! Distances here are value-level and pure. The GED *metric* uses the
//! soft-Dice distance and the all-ordered-pairs (V-statistic) estimator —
//! the standard multi-rater evaluation protocol, and the only form for which
//! `ged(S, S) = 0` holds identically — while the GED *loss* keeps the
//! unbiased distinct-pairs diversity term with a soft-IoU distance. The two
//! are deliberately separate hooks.

pub mod hungarian;
pub mod spectral;

use serde::{Deserialize, Serialize};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stabilizer for soft-Dice ratios.
pub const METRIC_EPS: f64 = 1e-6;

/// Tolerance band applied when classifying rater-agreement regimes.
pub const AGREEMENT_DELTA: f64 = 0.1;

/// A set of `K` stochastic soft segmentation hypotheses for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    masks: Vec<Tensor>,
    pub seed: u64,
}

impl PredictionSet {
    pub fn new(masks: Vec<Tensor>, seed: u64) -> Result<Self> {
        const OP: &str = "PredictionSet::new";
        if masks.is_empty() {
            return Err(Error::invalid(OP, "need at least one prediction".to_string()));
        }
        let shape = masks[0].shape().to_vec();
        for m in &masks {
            if m.shape() != shape {
                return Err(Error::shape(OP, format!("{shape:?}"), format!("{:?}", m.shape())));
            }
            if m.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(OP, "prediction entries must lie in [0,1]".to_string()));
            }
        }
        Ok(PredictionSet { masks, seed })
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    /// Pixel-wise mean soft prediction.
    pub fn mean_mask(&self) -> Tensor {
        mean_of(&self.masks)
    }
}

/// The annotations of one image: one strictly binary mask per rater.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    masks: Vec<Tensor>,
    pub rater_ids: Vec<usize>,
}

impl AnnotationSet {
    pub fn new(masks: Vec<Tensor>, rater_ids: Vec<usize>) -> Result<Self> {
        const OP: &str = "AnnotationSet::new";
        if masks.is_empty() {
            return Err(Error::invalid(OP, "need at least one annotation".to_string()));
        }
        if masks.len() != rater_ids.len() {
            return Err(Error::invalid(
                OP,
                format!("{} masks but {} rater ids", masks.len(), rater_ids.len()),
            ));
        }
        let shape = masks[0].shape().to_vec();
        for m in &masks {
            if m.shape() != shape {
                return Err(Error::shape(OP, format!("{shape:?}"), format!("{:?}", m.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(OP, "annotations must be strictly binary".to_string()));
            }
        }
        Ok(AnnotationSet { masks, rater_ids })
    }

    pub fn n(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    /// Pixel-wise mean annotation (`p_A`).
    pub fn mean_mask(&self) -> Tensor {
        mean_of(&self.masks)
    }
}

fn mean_of(masks: &[Tensor]) -> Tensor {
    let mut acc = vec![0.0; masks[0].numel()];
    for m in masks {
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let k = masks.len() as f64;
    for a in acc.iter_mut() {
        *a /= k;
    }
    Tensor::new(masks[0].shape().to_vec(), acc).expect("same shape")
}

// ---- distances ---------------------------------------------------------

/// Soft-Dice distance `1 - (2 sum ab + eps) / (sum a + sum b + eps)`.
pub fn soft_dice_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "soft_dice_distance",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let inter: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let sa: f64 = a.data().iter().sum();
    let sb: f64 = b.data().iter().sum();
    Ok(1.0 - (2.0 * inter + METRIC_EPS) / (sa + sb + METRIC_EPS))
}

/// Hard Dice of two binary masks. Two empty masks count as perfect agreement.
pub fn dice_binary(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "dice_binary",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += x * y;
        total += x + y;
    }
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / total)
}

/// Thresholds a soft mask: `v >= tau -> 1`.
pub fn binarize(t: &Tensor, tau: f64) -> Tensor {
    let data = t.data().iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

// ---- generalized energy distance ----------------------------------------

/// Outcome of the GED estimator with its diagnostic flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GedEstimate {
    /// Clamped-at-zero estimate.
    pub value: f64,
    /// Raw (possibly slightly negative) estimate.
    pub raw: f64,
    /// Single-prediction fallback: the prediction self-term was defined as 0.
    pub k1_fallback: bool,
    /// Raw value was negative and clamped.
    pub clamped: bool,
}

/// Squared generalized energy distance between the prediction and annotation
/// distributions: `2 E[d(P,A)] - E[d(P,P')] - E[d(A,A')]` with soft-Dice `d`
/// and every expectation taken over all ordered pairs (diagonal included).
pub fn ged_metric(preds: &PredictionSet, annots: &AnnotationSet) -> Result<GedEstimate> {
    let k = preds.k();
    let n = annots.n();

    let mut cross = 0.0;
    for p in preds.masks() {
        for a in annots.masks() {
            cross += soft_dice_distance(p, a)?;
        }
    }
    cross /= (k * n) as f64;

    let mut self_p = 0.0;
    let k1_fallback = k == 1;
    if !k1_fallback {
        for i in 0..k {
            for j in 0..k {
                self_p += soft_dice_distance(&preds.masks()[i], &preds.masks()[j])?;
            }
        }
        self_p /= (k * k) as f64;
    }

    let mut self_a = 0.0;
    for i in 0..n {
        for j in 0..n {
            self_a += soft_dice_distance(&annots.masks()[i], &annots.masks()[j])?;
        }
    }
    self_a /= (n * n) as f64;

    let raw = 2.0 * cross - self_p - self_a;
    let clamped = raw < 0.0;
    Ok(GedEstimate {
        value: raw.max(0.0),
        raw,
        k1_fallback,
        clamped,
    })
}

// ---- Dice family ---------------------------------------------------------

/// Threshold sweep used by [`dice_soft`].
pub const SOFT_DICE_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Soft-thresholded Dice: the mean prediction and mean annotation are
/// binarized at each threshold in `{0.1..0.9}` and the hard Dice scores are
/// averaged.
pub fn dice_soft(preds: &PredictionSet, annots: &AnnotationSet) -> Result<f64> {
    let p = preds.mean_mask();
    let a = annots.mean_mask();
    let mut acc = 0.0;
    for &tau in &SOFT_DICE_THRESHOLDS {
        acc += dice_binary(&binarize(&p, tau), &binarize(&a, tau))?;
    }
    Ok(acc / SOFT_DICE_THRESHOLDS.len() as f64)
}

/// Best-case coverage: for each annotation, the best Dice over all
/// predictions (binarized at 0.5); averaged over annotations.
pub fn dice_max(preds: &PredictionSet, annots: &AnnotationSet) -> Result<f64> {
    let hard: Vec<Tensor> = preds.masks().iter().map(|m| binarize(m, 0.5)).collect();
    let mut acc = 0.0;
    for a in annots.masks() {
        let mut best = 0.0f64;
        for p in &hard {
            best = best.max(dice_binary(p, a)?);
        }
        acc += best;
    }
    Ok(acc / annots.n() as f64)
}

/// Optimal one-to-one matching: Hungarian assignment on the `K x N` cost
/// matrix `1 - Dice` (binarized at 0.5), rectangular cases padded with
/// zero-Dice dummies; the mean Dice over the pairs covering all annotations.
pub fn dice_match(preds: &PredictionSet, annots: &AnnotationSet) -> Result<f64> {
    let k = preds.k();
    let n = annots.n();
    let hard: Vec<Tensor> = preds.masks().iter().map(|m| binarize(m, 0.5)).collect();
    let mut dice = vec![vec![0.0; n]; k];
    for (i, p) in hard.iter().enumerate() {
        for (j, a) in annots.masks().iter().enumerate() {
            dice[i][j] = dice_binary(p, a)?;
        }
    }
    let side = k.max(n);
    let mut cost = vec![1.0; side * side]; // dummy pairs: Dice 0 -> cost 1
    for (i, row) in dice.iter().enumerate() {
        for (j, &d) in row.iter().enumerate() {
            cost[i * side + j] = 1.0 - d;
        }
    }
    let assign = hungarian::solve(&cost, side)?;
    let mut acc = 0.0;
    for (i, &j) in assign.iter().enumerate() {
        if j < n && i < k {
            acc += dice[i][j];
        }
    }
    Ok(acc / n as f64)
}

/// Per-rater Dice between each rater's personalized prediction and that
/// rater's annotation (binarized at 0.5), plus the arithmetic mean.
pub fn dice_per_rater(preds: &[Tensor], annots: &AnnotationSet) -> Result<(Vec<f64>, f64)> {
    if preds.len() != annots.n() {
        return Err(Error::invalid(
            "dice_per_rater",
            format!("{} predictions for {} raters", preds.len(), annots.n()),
        ));
    }
    let mut scores = Vec::with_capacity(preds.len());
    for (p, a) in preds.iter().zip(annots.masks()) {
        scores.push(dice_binary(&binarize(p, 0.5), a)?);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

// ---- calibration ---------------------------------------------------------

/// Expected calibration error over pooled pixels with `k_bins` equal-width
/// confidence bins; empty bins contribute nothing.
pub fn ece(probs: &[f64], labels: &[f64], k_bins: usize) -> Result<f64> {
    const OP: &str = "ece";
    if k_bins == 0 {
        return Err(Error::invalid(OP, "need at least one bin".to_string()));
    }
    if probs.len() != labels.len() {
        return Err(Error::invalid(
            OP,
            format!("{} probabilities vs {} labels", probs.len(), labels.len()),
        ));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; k_bins];
    let mut conf = vec![0.0; k_bins];
    let mut acc = vec![0.0; k_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) || (y != 0.0 && y != 1.0) {
            return Err(Error::invalid(OP, "probs must lie in [0,1], labels in {0,1}".to_string()));
        }
        let b = ((p * k_bins as f64) as usize).min(k_bins - 1);
        count[b] += 1;
        conf[b] += p;
        acc[b] += y;
    }
    let total = probs.len() as f64;
    let mut e = 0.0;
    for b in 0..k_bins {
        if count[b] == 0 {
            continue;
        }
        let c = count[b] as f64;
        e += c / total * ((acc[b] / c) - (conf[b] / c)).abs();
    }
    Ok(e)
}

/// Brier score: mean squared gap between confidence and label.
pub fn brier(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::invalid(
            "brier",
            format!("{} probabilities vs {} labels", probs.len(), labels.len()),
        ));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - y) * (p - y))
        .sum::<f64>()
        / probs.len() as f64)
}

// ---- uncertainty ---------------------------------------------------------

/// Normalized binary entropy in bits, with `0 log 0 := 0`; peaks at 1 for
/// `p = 0.5` and vanishes at the endpoints.
pub fn normalized_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    term(p) + term(1.0 - p)
}

/// Pixel-wise normalized entropy of the mean prediction.
pub fn entropy_map(preds: &PredictionSet) -> Tensor {
    let mean = preds.mean_mask();
    let data = mean.data().iter().map(|&p| normalized_entropy(p)).collect();
    Tensor::new(mean.shape().to_vec(), data).expect("same shape")
}

/// Median of a sample (mean of the middle pair for even sizes); `None` when
/// empty.
pub fn median_of(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite entropies"));
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}



/// Pixel classes over unanimously annotated pixels, index order TP, FP, FN,
/// TN, with per-class entropy medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessReport {
    pub counts: [usize; 4],
    pub median_entropy: [Option<f64>; 4],
    pub unanimous_pixels: usize,
    pub total_pixels: usize,
}

/// Per-pixel correctness class over unanimous pixels: `Some(0..4)` (TP, FP,
/// FN, TN) where every rater agrees, `None` elsewhere. Dataset-level
/// analyses pool these across cases.
pub fn correctness_classes(
    preds: &PredictionSet,
    annots: &AnnotationSet,
) -> Result<Vec<Option<usize>>> {
    let mean_p = preds.mean_mask();
    let p_a = annots.mean_mask();
    if mean_p.shape() != p_a.shape() {
        return Err(Error::shape(
            "correctness_classes",
            format!("{:?}", p_a.shape()),
            format!("{:?}", mean_p.shape()),
        ));
    }
    Ok((0..p_a.numel())
        .map(|i| {
            let consensus = p_a.data()[i];
            if consensus != 0.0 && consensus != 1.0 {
                return None;
            }
            let predicted = mean_p.data()[i] >= 0.5;
            let label = consensus == 1.0;
            Some(match (predicted, label) {
                (true, true) => 0,   // TP
                (true, false) => 1,  // FP
                (false, true) => 2,  // FN
                (false, false) => 3, // TN
            })
        })
        .collect())
}

/// Classifies unanimous pixels (every rater agrees) by thresholding the mean
/// prediction at 0.5 against the unanimous label, collecting predictive
/// entropy per class. Non-unanimous pixels are excluded. A report with zero
/// unanimous pixels carries empty classes; the caller decides how loudly to
/// warn.
pub fn correctness_partition(
    preds: &PredictionSet,
    annots: &AnnotationSet,
) -> Result<CorrectnessReport> {
    let classes = correctness_classes(preds, annots)?;
    let ent = entropy_map(preds);
    let mut class_entropy: [Vec<f64>; 4] = [vec![], vec![], vec![], vec![]];
    let mut unanimous = 0usize;
    for (i, class) in classes.iter().enumerate() {
        if let Some(c) = class {
            unanimous += 1;
            class_entropy[*c].push(ent.data()[i]);
        }
    }
    let counts = [
        class_entropy[0].len(),
        class_entropy[1].len(),
        class_entropy[2].len(),
        class_entropy[3].len(),
    ];
    let median_entropy = class_entropy.map(median_of);
    Ok(CorrectnessReport {
        counts,
        median_entropy,
        unanimous_pixels: unanimous,
        total_pixels: classes.len(),
    })
}

/// Entropy statistics per rater-agreement regime, index order: agree,
/// somewhat agree, disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub counts: [usize; 3],
    pub mean_entropy: [Option<f64>; 3],
    pub median_entropy: [Option<f64>; 3],
}

/// Per-pixel agreement regime from the mean annotation: 0 = agree (within
/// [`AGREEMENT_DELTA`] of 0 or 1), 2 = disagree (within the band around
/// 0.5), 1 = somewhat agree (everything else). Requires two or more raters.
pub fn agreement_regimes(annots: &AnnotationSet) -> Result<Vec<usize>> {
    if annots.n() < 2 {
        return Err(Error::invalid(
            "agreement_regimes",
            "agreement regimes need at least two raters".to_string(),
        ));
    }
    Ok(annots
        .mean_mask()
        .data()
        .iter()
        .map(|&pa| {
            if pa <= AGREEMENT_DELTA || pa >= 1.0 - AGREEMENT_DELTA {
                0
            } else if (pa - 0.5).abs() <= AGREEMENT_DELTA {
                2
            } else {
                1
            }
        })
        .collect())
}

/// Buckets pixels by rater agreement: `p_A` within [`AGREEMENT_DELTA`] of 0
/// or 1 is "agree", within the band around 0.5 is "disagree", anything else
/// "somewhat agree"; collects the given entropy map per regime.
pub fn agreement_bins(annots: &AnnotationSet, entropy: &Tensor) -> Result<AgreementStats> {
    const OP: &str = "agreement_bins";
    let regimes = agreement_regimes(annots)?;
    if entropy.numel() != regimes.len() {
        return Err(Error::shape(
            OP,
            format!("{} pixels", regimes.len()),
            format!("{:?}", entropy.shape()),
        ));
    }
    let mut per_regime: [Vec<f64>; 3] = [vec![], vec![], vec![]];
    for (i, &regime) in regimes.iter().enumerate() {
        per_regime[regime].push(entropy.data()[i]);
    }
    let counts = [per_regime[0].len(), per_regime[1].len(), per_regime[2].len()];
    let mean_entropy = [
        mean_opt(&per_regime[0]),
        mean_opt(&per_regime[1]),
        mean_opt(&per_regime[2]),
    ];
    let median_entropy = per_regime.map(median_of);
    Ok(AgreementStats {
        counts,
        mean_entropy,
        median_entropy,
    })
}

fn mean_opt(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// One tercile of the size stratification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBin {
    pub count: usize,
    pub mean_dice: f64,
    pub min_area: f64,
    pub max_area: f64,
}

/// Splits `(consensus area, dice)` cases into three equally populated bins by
/// area (stable original order breaks ties) and summarizes Dice per bin.
pub fn size_stratify(cases: &[(f64, f64)]) -> Result<[SizeBin; 3]> {
    const OP: &str = "size_stratify";
    if cases.len() < 3 {
        return Err(Error::invalid(
            OP,
            format!("need at least 3 cases for terciles, got {}", cases.len()),
        ));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by(|&a, &b| cases[a].0.partial_cmp(&cases[b].0).expect("finite areas"));
    let n = cases.len();
    let mut bins = Vec::with_capacity(3);
    for b in 0..3 {
        let lo = b * n / 3;
        let hi = (b + 1) * n / 3;
        let slice: Vec<(f64, f64)> = order[lo..hi].iter().map(|&i| cases[i]).collect();
        let count = slice.len();
        let mean_dice = slice.iter().map(|c| c.1).sum::<f64>() / count as f64;
        let min_area = slice.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let max_area = slice.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        bins.push(SizeBin {
            count,
            mean_dice,
            min_area,
            max_area,
        });
    }
    Ok([bins[0], bins[1], bins[2]])
}
