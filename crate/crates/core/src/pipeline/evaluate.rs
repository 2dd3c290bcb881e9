//! Test-set evaluation: per-case distribution, overlap, and calibration
//! metrics; dataset-level pooled analyses (calibration over all pixels,
//! uncertainty by correctness class and by rater-agreement regime, Dice by
//! lesion size); and the sample-count curve showing how the distribution
//! distance behaves as the hypothesis set grows.

use crate::error::{Error, Result};
use crate::metrics::{
    agreement_regimes, binarize, brier, correctness_classes, dice_binary, dice_match, dice_max,
    dice_per_rater, dice_soft, ece, entropy_map, ged_metric, median_of, size_stratify,
    AgreementStats, AnnotationSet, CorrectnessReport, PredictionSet, SizeBin,
};
use crate::model::{HarmonizerModel, ModelModes};
use crate::rng::derive_seed;
use crate::synthdata::{consensus_of, MultiRaterSample};
use crate::tensor::params::ParamSet;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Bin count for every expected-calibration-error computation here.
pub const ECE_BINS: usize = 10;

/// All metrics for a single test case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub index: usize,
    /// Clamped distribution distance between hypothesis set and annotations.
    pub ged: f64,
    /// Raw (possibly slightly negative) value behind `ged`.
    pub ged_raw: f64,
    pub ged_k1_fallback: bool,
    pub ged_clamped: bool,
    pub dice_soft: f64,
    pub dice_max: f64,
    pub dice_match: f64,
    /// Dice of the rater-personalized prediction against each rater, when
    /// the model is personalized for exactly the annotating raters;
    /// otherwise Dice of the mean-prediction consensus against each rater.
    pub per_rater_dice: Vec<f64>,
    /// Calibration of the mean prediction against the consensus mask.
    pub ece: f64,
    pub brier: f64,
    /// Mean normalized binary entropy of the mean prediction.
    pub mean_entropy: f64,
    /// Foreground pixel count of the consensus annotation.
    pub consensus_area: f64,
}

/// Aggregate report over a test set. Per-pixel analyses (calibration,
/// uncertainty by correctness and agreement) pool pixels across all cases
/// before binning, so rare classes are summarized once rather than averaged
/// over per-case medians.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub mean_ged: f64,
    pub std_ged: f64,
    pub mean_dice_soft: f64,
    pub mean_dice_max: f64,
    pub mean_dice_match: f64,
    pub mean_per_rater_dice: Vec<f64>,
    /// Pooled over every pixel of every case.
    pub pooled_ece: f64,
    pub pooled_brier: f64,
    pub correctness: CorrectnessReport,
    pub agreement: AgreementStats,
    pub size_bins: [SizeBin; 3],
}

/// One row of the sample-count curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GedCurveRow {
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
    /// True when any case used the single-hypothesis fallback (always the
    /// case for `k == 1`).
    pub k1_fallback: bool,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Evaluates a model over a test set with `k` hypotheses per case.
///
/// Per-rater Dice uses personalized predictions when the model's rater count
/// matches the annotation count (one prediction per rater); otherwise — e.g.
/// for a single-rater consensus baseline — every rater is scored against the
/// binarized mean of the hypothesis set.
pub fn evaluate(
    model: &HarmonizerModel,
    params: &ParamSet,
    samples: &[&MultiRaterSample],
    k: usize,
    seed: u64,
    harmonize: bool,
) -> Result<MetricsReport> {
    const OP: &str = "evaluate";
    if samples.is_empty() {
        return Err(Error::invalid(OP, "need at least one test case".to_string()));
    }
    let mut cases = Vec::with_capacity(samples.len());
    let mut pooled_probs: Vec<f64> = Vec::new();
    let mut pooled_labels: Vec<f64> = Vec::new();
    // Pooled entropies keyed by correctness class (TP, FP, FN, TN) ...
    let mut class_entropy: [Vec<f64>; 4] = Default::default();
    let mut unanimous = 0usize;
    let mut total_pixels = 0usize;
    // ... and by agreement regime (agree, somewhat, disagree).
    let mut regime_entropy: [Vec<f64>; 3] = Default::default();

    for s in samples {
        let n_raters = s.masks.len();
        let preds = PredictionSet::new(
            model.predict_set(params, &s.image, k, derive_seed(seed, &[s.index as u64]), harmonize)?,
            seed,
        )?;
        let annots = AnnotationSet::new(s.masks.clone(), (0..n_raters).collect())?;

        let ged = ged_metric(&preds, &annots)?;
        let consensus = consensus_of(&s.masks);
        let mean_pred = preds.mean_mask();

        let per_rater_dice = if model.config.backbone.num_raters == n_raters {
            let mut masks = Vec::with_capacity(n_raters);
            for rater in 0..n_raters {
                masks.push(model.predict_personalized(
                    params,
                    &s.image,
                    rater,
                    derive_seed(seed, &[s.index as u64, 100 + rater as u64]),
                    harmonize,
                )?);
            }
            dice_per_rater(&masks, &annots)?.0
        } else {
            let hard = binarize(&mean_pred, 0.5);
            s.masks
                .iter()
                .map(|a| dice_binary(&hard, a))
                .collect::<Result<Vec<f64>>>()?
        };

        let case_ece = ece(mean_pred.data(), consensus.data(), ECE_BINS)?;
        let case_brier = brier(mean_pred.data(), consensus.data())?;
        pooled_probs.extend_from_slice(mean_pred.data());
        pooled_labels.extend_from_slice(consensus.data());

        let entropies = entropy_map(&preds);
        for (cls, &h) in correctness_classes(&preds, &annots)?
            .iter()
            .zip(entropies.data())
        {
            total_pixels += 1;
            if let Some(c) = cls {
                unanimous += 1;
                class_entropy[*c].push(h);
            }
        }
        if n_raters >= 2 {
            for (reg, &h) in agreement_regimes(&annots)?.iter().zip(entropies.data()) {
                regime_entropy[*reg].push(h);
            }
        }

        cases.push(CaseMetrics {
            index: s.index,
            ged: ged.value,
            ged_raw: ged.raw,
            ged_k1_fallback: ged.k1_fallback,
            ged_clamped: ged.clamped,
            dice_soft: dice_soft(&preds, &annots)?,
            dice_max: dice_max(&preds, &annots)?,
            dice_match: dice_match(&preds, &annots)?,
            per_rater_dice,
            ece: case_ece,
            brier: case_brier,
            mean_entropy: entropies.data().iter().sum::<f64>() / entropies.numel() as f64,
            consensus_area: consensus.data().iter().sum(),
        });
    }

    let (mean_ged, std_ged) = mean_std(&cases.iter().map(|c| c.ged).collect::<Vec<_>>());
    let n = cases.len() as f64;
    let n_raters = cases[0].per_rater_dice.len();
    let mut mean_per_rater_dice = vec![0.0; n_raters];
    for c in &cases {
        for (acc, v) in mean_per_rater_dice.iter_mut().zip(&c.per_rater_dice) {
            *acc += v / n;
        }
    }

    let correctness = CorrectnessReport {
        counts: std::array::from_fn(|c| class_entropy[c].len()),
        median_entropy: std::array::from_fn(|c| median_of(class_entropy[c].clone())),
        unanimous_pixels: unanimous,
        total_pixels,
    };
    let agreement = AgreementStats {
        counts: std::array::from_fn(|r| regime_entropy[r].len()),
        mean_entropy: std::array::from_fn(|r| {
            let v = &regime_entropy[r];
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        }),
        median_entropy: std::array::from_fn(|r| median_of(regime_entropy[r].clone())),
    };
    let size_bins = size_stratify(
        &cases
            .iter()
            .map(|c| (c.consensus_area, c.dice_match))
            .collect::<Vec<_>>(),
    )?;

    Ok(MetricsReport {
        mean_ged,
        std_ged,
        mean_dice_soft: cases.iter().map(|c| c.dice_soft).sum::<f64>() / n,
        mean_dice_max: cases.iter().map(|c| c.dice_max).sum::<f64>() / n,
        mean_dice_match: cases.iter().map(|c| c.dice_match).sum::<f64>() / n,
        mean_per_rater_dice,
        pooled_ece: ece(&pooled_probs, &pooled_labels, ECE_BINS)?,
        pooled_brier: brier(&pooled_probs, &pooled_labels)?,
        correctness,
        agreement,
        size_bins,
        cases,
    })
}

/// Distribution distance as a function of hypothesis-set size: one row per
/// entry of `k_list`, each the mean ± sample std (and standard error) over
/// all cases. Hypothesis draws are independent across rows and cases but
/// deterministic per seed.
pub fn ged_vs_samples(
    model: &HarmonizerModel,
    params: &ParamSet,
    samples: &[&MultiRaterSample],
    k_list: &[usize],
    seed: u64,
    harmonize: bool,
) -> Result<Vec<GedCurveRow>> {
    const OP: &str = "ged_vs_samples";
    if samples.is_empty() {
        return Err(Error::invalid(OP, "need at least one test case".to_string()));
    }
    if k_list.is_empty() {
        return Err(Error::invalid(OP, "need at least one sample count".to_string()));
    }
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let mut values = Vec::with_capacity(samples.len());
        let mut fallback = false;
        for s in samples {
            let preds = PredictionSet::new(
                model.predict_set(
                    params,
                    &s.image,
                    k,
                    derive_seed(seed, &[k as u64, s.index as u64]),
                    harmonize,
                )?,
                seed,
            )?;
            let annots = AnnotationSet::new(s.masks.clone(), (0..s.masks.len()).collect())?;
            let est = ged_metric(&preds, &annots)?;
            values.push(est.value);
            fallback |= est.k1_fallback;
        }
        let (mean, std) = mean_std(&values);
        rows.push(GedCurveRow {
            k,
            mean,
            std,
            stderr: std / (values.len() as f64).sqrt(),
            k1_fallback: fallback,
        });
    }
    Ok(rows)
}

/// The canonical sample counts for the curve.
pub const DEFAULT_K_LIST: [usize; 5] = [1, 4, 8, 16, 32];

/// The final decoder feature map (the spectral probe's input) for one image
/// and one prior draw. `rater = Some(r)` routes the latent through the
/// personalizer and conditions the decode on that rater; `None` decodes the
/// raw draw. The draw itself is identical for both settings at equal seeds,
/// so the two features differ only by personalization.
pub fn final_decoder_feature(
    model: &HarmonizerModel,
    params: &ParamSet,
    x: &Tensor,
    rater: Option<usize>,
    seed: u64,
    harmonize: bool,
) -> Result<Tensor> {
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut tape = Tape::new();
    let modes = ModelModes::frozen();
    let xv = tape.constant(x.clone());
    let features = model.encode(&mut tape, params, modes, xv)?;
    let prior = model.prior(&mut tape, params, modes, xv)?;
    let trunk = model.decode_trunk(&mut tape, params, modes, &features, harmonize)?;
    let d = model.config.backbone.latent_dim;
    let eps = Tensor::new(vec![d], crate::rng::normal_vec(&mut rng, d))?;
    let mut z = model.backbone.sample_latent(&mut tape, &prior, &eps)?;
    if let Some(r) = rater {
        let snap = model.backbone.snapshot_latent(&tape, &prior);
        let bank = crate::personalizer::PriorBank::from_latent(&snap, model.config.bank_size, &mut rng)?;
        z = model.personalize(&mut tape, params, modes, &trunk, z, r, &bank)?;
    }
    let head = model.decode_head(&mut tape, params, modes, &trunk, z, rater, harmonize)?;
    Ok(tape.value(head.feature).clone())
}
