//! Training objectives: soft-IoU distance, the generalized-energy-distance
//! loss over prediction/annotation sets, Dice + cross-entropy segmentation
//! loss, the composite phase-1 objective, and the phase-2 personalized loss.
//!
//! Every function here is deterministic given its inputs: latent noise and
//! rater choices are drawn by the caller and passed in, never sampled inside.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HarmonizerModel, ModelModes};
use crate::personalizer::PriorBank;
use crate::tensor::params::ParamSet;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stabilizer for soft-IoU and soft-Dice ratios.
pub const LOSS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_harm: f64,
    pub lambda_ged: f64,
    /// Dice share of the segmentation loss; the rest is cross-entropy.
    pub dice_ce_mix: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kl: 2e-3,
            lambda_harm: 3e-4,
            lambda_ged: 1.0,
            dice_ce_mix: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "LossWeights::validate";
        if self.lambda_kl < 0.0 || self.lambda_harm < 0.0 || self.lambda_ged < 0.0 {
            return Err(Error::invalid(OP, "loss weights must be non-negative".to_string()));
        }
        if !(0.0..=1.0).contains(&self.dice_ce_mix) {
            return Err(Error::invalid(
                OP,
                format!("dice_ce_mix must lie in [0,1], got {}", self.dice_ce_mix),
            ));
        }
        Ok(())
    }
}

/// Per-step decomposition of the phase-1 objective. `total` equals
/// `seg + lambda_kl * kl + lambda_harm * harm + lambda_ged * ged`, summed in
/// exactly that order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub kl: f64,
    pub harm: f64,
    pub ged: f64,
    pub total: f64,
}

/// Soft-IoU distance `1 - (sum ab + eps) / (sum a + sum b - sum ab + eps)`
/// between two soft masks of the same shape; lands in `[0, 1]`.
pub fn iou_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            "iou_distance",
            format!("{:?}", tape.shape(a)),
            format!("{:?}", tape.shape(b)),
        ));
    }
    let prod = tape.mul(a, b)?;
    let inter = tape.sum_all(prod)?;
    let sa = tape.sum_all(a)?;
    let sb = tape.sum_all(b)?;
    let total = tape.add(sa, sb)?;
    let union = tape.sub(total, inter)?;
    let num = tape.add_const(inter, LOSS_EPS)?;
    let den = tape.add_const(union, LOSS_EPS)?;
    let frac = tape.div(num, den)?;
    let neg = tape.mul_const(frac, -1.0)?;
    tape.add_const(neg, 1.0)
}

/// Generalized-energy-distance loss over a set of `K` predicted soft masks
/// and `N` annotation masks:
/// `(2/(K N)) sum_{k,i} d(P_k, A_i) - (2/(K(K-1))) sum_{k<k'} d(P_k, P_k')`
/// with `d` the soft-IoU distance. Differentiable through the predictions.
pub fn ged_loss(tape: &mut Tape, preds: &[Var], annots: &[Var]) -> Result<Var> {
    let (k, n) = (preds.len(), annots.len());
    if k < 2 {
        return Err(Error::invalid(
            "ged_loss",
            format!("pairwise diversity term needs K >= 2 prediction samples, got {k}; raise the sample count"),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("ged_loss", "need at least one annotation".to_string()));
    }

    let mut fidelity: Option<Var> = None;
    for &p in preds {
        for &a in annots {
            let d = iou_distance(tape, p, a)?;
            fidelity = Some(match fidelity {
                None => d,
                Some(acc) => tape.add(acc, d)?,
            });
        }
    }
    let fidelity = tape.mul_const(fidelity.expect("k*n >= 2"), 2.0 / (k * n) as f64)?;

    let mut diversity: Option<Var> = None;
    for i in 0..k {
        for j in (i + 1)..k {
            let d = iou_distance(tape, preds[i], preds[j])?;
            diversity = Some(match diversity {
                None => d,
                Some(acc) => tape.add(acc, d)?,
            });
        }
    }
    let diversity = tape.mul_const(
        diversity.expect("k >= 2 gives at least one pair"),
        2.0 / (k * (k - 1)) as f64,
    )?;
    tape.sub(fidelity, diversity)
}

/// Segmentation loss: `mix * softDice + (1 - mix) * BCE`, both pixel-level.
/// BCE uses the numerically stable `softplus(x) - t * x` form.
pub fn dice_ce_loss(tape: &mut Tape, logits: Var, target: Var, mix: f64) -> Result<Var> {
    if tape.shape(logits) != tape.shape(target) {
        return Err(Error::shape(
            "dice_ce_loss",
            format!("{:?}", tape.shape(logits)),
            format!("{:?}", tape.shape(target)),
        ));
    }
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::invalid("dice_ce_loss", format!("mix must lie in [0,1], got {mix}")));
    }
    let probs = tape.sigmoid(logits)?;

    // Soft Dice loss: 1 - (2 sum pt + eps) / (sum p + sum t + eps).
    let pt = tape.mul(probs, target)?;
    let inter = tape.sum_all(pt)?;
    let sp = tape.sum_all(probs)?;
    let st = tape.sum_all(target)?;
    let num = {
        let two = tape.mul_const(inter, 2.0)?;
        tape.add_const(two, LOSS_EPS)?
    };
    let den = {
        let s = tape.add(sp, st)?;
        tape.add_const(s, LOSS_EPS)?
    };
    let dice_score = tape.div(num, den)?;
    let dice = {
        let neg = tape.mul_const(dice_score, -1.0)?;
        tape.add_const(neg, 1.0)?
    };

    let sp_term = tape.softplus(logits)?;
    let tx = tape.mul(target, logits)?;
    let ce_map = tape.sub(sp_term, tx)?;
    let ce = tape.mean_all(ce_map)?;

    let a = tape.mul_const(dice, mix)?;
    let b = tape.mul_const(ce, 1.0 - mix)?;
    tape.add(a, b)
}

/// Composite phase-1 objective on a single image.
///
/// Reconstruction uses a posterior draw conditioned on rater `rater_k`'s
/// annotation and decodes with that rater's one-hot block; the GED term uses
/// `eps_ged.len()` prior draws decoded without rater conditioning; the
/// harmonizer penalty covers each modulated layer exactly once (trunk stages
/// plus the reconstruction head).
#[allow(clippy::too_many_arguments)]
pub fn total_loss_phase1(
    tape: &mut Tape,
    model: &HarmonizerModel,
    params: &ParamSet,
    weights: &LossWeights,
    x: &Tensor,
    annotations: &[Tensor],
    rater_k: usize,
    eps_recon: &Tensor,
    eps_ged: &[Tensor],
    harmonize: bool,
) -> Result<(Var, LossReport)> {
    const OP: &str = "total_loss_phase1";
    weights.validate()?;
    if annotations.is_empty() || rater_k >= annotations.len() {
        return Err(Error::invalid(
            OP,
            format!("rater index {rater_k} out of range for {} annotations", annotations.len()),
        ));
    }
    let (h, w) = (model.config.input_h, model.config.input_w);
    for a in annotations {
        if a.shape() != [h, w] {
            return Err(Error::shape(OP, format!("annotation [{h}, {w}]"), format!("{:?}", a.shape())));
        }
    }

    let modes = ModelModes::phase1();
    let xv = tape.constant(x.clone());
    let features = model.encode(tape, params, modes, xv)?;
    let prior = model.prior(tape, params, modes, xv)?;
    let mask_k = tape.constant(annotations[rater_k].clone().reshaped(vec![1, h, w])?);
    let posterior = model.posterior(tape, params, modes, xv, mask_k)?;

    let trunk = model.decode_trunk(tape, params, modes, &features, harmonize)?;

    // Reconstruction through the posterior draw, rater-conditioned.
    let z_q = model.backbone.sample_latent(tape, &posterior, eps_recon)?;
    let recon = model.decode_head(tape, params, modes, &trunk, z_q, Some(rater_k), harmonize)?;
    let seg = dice_ce_loss(tape, recon.logits, mask_k, weights.dice_ce_mix)?;

    let kl = model.backbone.kl_divergence(tape, &posterior, &prior)?;

    // Hypothesis set from the prior for the GED term. No draws at all means
    // the term is disabled (ablation); a single draw is still an error, since
    // a one-sample diversity estimate is meaningless.
    let ged = if eps_ged.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mut preds = Vec::with_capacity(eps_ged.len());
        for eps in eps_ged {
            let z = model.backbone.sample_latent(tape, &prior, eps)?;
            let head = model.decode_head(tape, params, modes, &trunk, z, None, harmonize)?;
            preds.push(tape.sigmoid(head.logits)?);
        }
        let annot_vars: Vec<Var> = annotations
            .iter()
            .map(|a| {
                let t = a.clone().reshaped(vec![1, h, w])?;
                Ok(tape.constant(t))
            })
            .collect::<Result<_>>()?;
        ged_loss(tape, &preds, &annot_vars)?
    };

    let mut records = trunk.records.clone();
    if let Some(rec) = recon.record {
        records.push(rec);
    }
    let harm = model.harmonizer.penalty(tape, &records)?;

    let kl_term = tape.mul_const(kl, weights.lambda_kl)?;
    let harm_term = tape.mul_const(harm, weights.lambda_harm)?;
    let ged_term = tape.mul_const(ged, weights.lambda_ged)?;
    let total = {
        let t = tape.add(seg, kl_term)?;
        let t = tape.add(t, harm_term)?;
        tape.add(t, ged_term)?
    };

    let report = LossReport {
        seg: tape.value(seg).item()?,
        kl: tape.value(kl).item()?,
        harm: tape.value(harm).item()?,
        ged: tape.value(ged).item()?,
        total: tape.value(total).item()?,
    };
    Ok((total, report))
}

/// Phase-2 objective on a single image: for each of `eps_draws.len()` prior
/// draws, personalize the latent per rater and score the rater-conditioned
/// decode against that rater's annotation; terms are summed over raters and
/// averaged over draws. Returns the loss and the per-rater draw-averaged
/// components.
#[allow(clippy::too_many_arguments)]
pub fn phase2_loss(
    tape: &mut Tape,
    model: &HarmonizerModel,
    params: &ParamSet,
    weights: &LossWeights,
    x: &Tensor,
    annotations: &[Tensor],
    bank: &PriorBank,
    eps_draws: &[Tensor],
    harmonize: bool,
) -> Result<(Var, Vec<f64>)> {
    const OP: &str = "phase2_loss";
    weights.validate()?;
    let r = model.config.backbone.num_raters;
    if annotations.len() != r {
        return Err(Error::invalid(
            OP,
            format!("need one annotation per rater ({r}), got {}", annotations.len()),
        ));
    }
    if eps_draws.is_empty() {
        return Err(Error::invalid(OP, "need at least one prior draw".to_string()));
    }
    let (h, w) = (model.config.input_h, model.config.input_w);

    let modes = ModelModes::phase2();
    let xv = tape.constant(x.clone());
    let features = model.encode(tape, params, modes, xv)?;
    let prior = model.prior(tape, params, modes, xv)?;
    let trunk = model.decode_trunk(tape, params, modes, &features, harmonize)?;

    let targets: Vec<Var> = annotations
        .iter()
        .map(|a| {
            let t = a.clone().reshaped(vec![1, h, w])?;
            Ok(tape.constant(t))
        })
        .collect::<Result<_>>()?;

    let s = eps_draws.len();
    let mut per_rater = vec![0.0; r];
    let mut total: Option<Var> = None;
    for eps in eps_draws {
        let z = model.backbone.sample_latent(tape, &prior, eps)?;
        for (i, &target) in targets.iter().enumerate() {
            let z_p = model.personalize(tape, params, modes, &trunk, z, i, bank)?;
            let head = model.decode_head(tape, params, modes, &trunk, z_p, Some(i), harmonize)?;
            let seg = dice_ce_loss(tape, head.logits, target, weights.dice_ce_mix)?;
            per_rater[i] += tape.value(seg).item()? / s as f64;
            total = Some(match total {
                None => seg,
                Some(acc) => tape.add(acc, seg)?,
            });
        }
    }
    let loss = tape.mul_const(total.expect("raters >= 1, draws >= 1"), 1.0 / s as f64)?;
    Ok((loss, per_rater))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::{normal_vec, rng_from_seed, uniform_vec};

    fn soft_mask(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::new(vec![h, w], uniform_vec(&mut rng, h * w, 0.0, 1.0)).unwrap()
    }

    fn scalar_iou_distance(a: &Tensor, b: &Tensor) -> f64 {
        let inter: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let sa: f64 = a.data().iter().sum();
        let sb: f64 = b.data().iter().sum();
        1.0 - (inter + LOSS_EPS) / (sa + sb - inter + LOSS_EPS)
    }

    #[test]
    fn iou_distance_identity_and_disjoint() {
        let mut tape = Tape::new();
        let mut m = Tensor::zeros(&[4, 4]);
        m.data_mut()[0] = 1.0;
        m.data_mut()[5] = 1.0;
        let a = tape.constant(m.clone());
        let d_same = iou_distance(&mut tape, a, a).unwrap();
        assert!(tape.value(d_same).item().unwrap().abs() < 1e-6);

        let mut n = Tensor::zeros(&[4, 4]);
        n.data_mut()[10] = 1.0;
        let b = tape.constant(n);
        let d_disjoint = iou_distance(&mut tape, a, b).unwrap();
        let expect = 1.0 - LOSS_EPS / (3.0 + LOSS_EPS);
        assert!((tape.value(d_disjoint).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn iou_distance_half_overlap_case() {
        // a = {p1}, b = {p1, p2}: intersection 1, union 2 -> distance 0.5.
        let mut tape = Tape::new();
        let mut at = Tensor::zeros(&[2, 2]);
        at.data_mut()[0] = 1.0;
        let mut bt = Tensor::zeros(&[2, 2]);
        bt.data_mut()[0] = 1.0;
        bt.data_mut()[1] = 1.0;
        let a = tape.constant(at);
        let b = tape.constant(bt);
        let d = iou_distance(&mut tape, a, b).unwrap();
        assert!((tape.value(d).item().unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn iou_distance_is_symmetric_and_bounded() {
        for seed in 0..5u64 {
            let at = soft_mask(seed * 2 + 1, 6, 6);
            let bt = soft_mask(seed * 2 + 2, 6, 6);
            let mut tape = Tape::new();
            let a = tape.constant(at.clone());
            let b = tape.constant(bt.clone());
            let dab = iou_distance(&mut tape, a, b).unwrap();
            let dba = iou_distance(&mut tape, b, a).unwrap();
            let (vab, vba) = (tape.value(dab).item().unwrap(), tape.value(dba).item().unwrap());
            assert_eq!(vab, vba);
            assert!((0.0..=1.0).contains(&vab));
            assert!((vab - scalar_iou_distance(&at, &bt)).abs() < 1e-12);
        }
    }

    /// Naive double-loop scalar reference for the GED loss.
    fn scalar_ged(preds: &[Tensor], annots: &[Tensor]) -> f64 {
        let (k, n) = (preds.len(), annots.len());
        let mut fid = 0.0;
        for p in preds {
            for a in annots {
                fid += scalar_iou_distance(p, a);
            }
        }
        fid *= 2.0 / (k * n) as f64;
        let mut div = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                div += scalar_iou_distance(&preds[i], &preds[j]);
            }
        }
        div *= 2.0 / (k * (k - 1)) as f64;
        fid - div
    }

    #[test]
    fn ged_loss_matches_scalar_reference() {
        let mut seed = 100u64;
        for &k in &[2usize, 3, 6] {
            for &n in &[1usize, 3] {
                let preds_t: Vec<Tensor> = (0..k)
                    .map(|_| {
                        seed += 1;
                        soft_mask(seed, 8, 8)
                    })
                    .collect();
                let annots_t: Vec<Tensor> = (0..n)
                    .map(|_| {
                        seed += 1;
                        soft_mask(seed, 8, 8)
                    })
                    .collect();
                let mut tape = Tape::new();
                let preds: Vec<Var> = preds_t.iter().map(|t| tape.constant(t.clone())).collect();
                let annots: Vec<Var> = annots_t.iter().map(|t| tape.constant(t.clone())).collect();
                let loss = ged_loss(&mut tape, &preds, &annots).unwrap();
                let reference = scalar_ged(&preds_t, &annots_t);
                assert!(
                    (tape.value(loss).item().unwrap() - reference).abs() < 1e-12,
                    "K={k} N={n}"
                );
            }
        }
    }

    #[test]
    fn ged_loss_zero_when_everything_matches() {
        // Binary mask repeated as both predictions and the annotation: every
        // pairwise distance is zero (soft-IoU is exact on binary masks).
        let mut m = Tensor::zeros(&[4, 4]);
        for i in [0usize, 1, 5, 9] {
            m.data_mut()[i] = 1.0;
        }
        let mut tape = Tape::new();
        let v = tape.constant(m);
        let loss = ged_loss(&mut tape, &[v, v], &[v]).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn ged_loss_requires_two_samples() {
        let mut tape = Tape::new();
        let v = tape.constant(soft_mask(8, 4, 4));
        let err = ged_loss(&mut tape, &[v], &[v]).unwrap_err();
        assert!(err.to_string().contains("raise the sample count"));
    }

    #[test]
    fn duplicated_predictions_keep_fidelity_term() {
        // Doubling K with identical extra samples leaves the fidelity mean
        // unchanged; with identical preds the diversity term is zero, so the
        // whole loss is invariant.
        let p = soft_mask(9, 6, 6);
        let a_t = soft_mask(10, 6, 6);
        let mut tape = Tape::new();
        let pv = tape.constant(p);
        let av = tape.constant(a_t);
        let l2 = ged_loss(&mut tape, &[pv, pv], &[av]).unwrap();
        let l4 = ged_loss(&mut tape, &[pv, pv, pv, pv], &[av]).unwrap();
        let (v2, v4) = (tape.value(l2).item().unwrap(), tape.value(l4).item().unwrap());
        assert!((v2 - v4).abs() < 1e-12);
    }

    #[test]
    fn dice_ce_saturated_and_analytic_cases() {
        let mut target_t = Tensor::zeros(&[1, 4, 4]);
        for i in 0..8 {
            target_t.data_mut()[i] = 1.0;
        }
        let logits_t = Tensor::new(
            vec![1, 4, 4],
            target_t.data().iter().map(|&t| if t > 0.5 { 20.0 } else { -20.0 }).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let logits = tape.constant(logits_t);
        let target = tape.constant(target_t);
        let loss = dice_ce_loss(&mut tape, logits, target, 0.5).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-6);

        // Zero logits against a uniform 0.5 target: pure CE = ln 2.
        let z = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let half = tape.constant(Tensor::full(&[1, 4, 4], 0.5));
        let ce_only = dice_ce_loss(&mut tape, z, half, 0.0).unwrap();
        assert!((tape.value(ce_only).item().unwrap() - (2.0f64).ln()).abs() < 1e-12);
    }

    // ---- composite objectives on a desk model -------------------------------

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_h: 16,
            input_w: 16,
            ..ModelConfig::default()
        }
    }

    fn rand_image(seed: u64, cfg: &ModelConfig) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let n = cfg.backbone.in_channels * cfg.input_h * cfg.input_w;
        Tensor::new(
            vec![cfg.backbone.in_channels, cfg.input_h, cfg.input_w],
            uniform_vec(&mut rng, n, 0.0, 1.0),
        )
        .unwrap()
    }

    fn binary_annotations(seed: u64, cfg: &ModelConfig) -> Vec<Tensor> {
        let mut rng = rng_from_seed(seed);
        (0..cfg.backbone.num_raters)
            .map(|_| {
                let data: Vec<f64> = uniform_vec(&mut rng, cfg.input_h * cfg.input_w, 0.0, 1.0)
                    .into_iter()
                    .map(|v| if v > 0.5 { 1.0 } else { 0.0 })
                    .collect();
                Tensor::new(vec![cfg.input_h, cfg.input_w], data).unwrap()
            })
            .collect()
    }

    fn eps(seed: u64, d: usize) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::new(vec![d], normal_vec(&mut rng, d)).unwrap()
    }

    #[test]
    fn phase1_decomposition_identity() {
        let cfg = small_config();
        let (model, params) = HarmonizerModel::new(cfg.clone(), 21).unwrap();
        let x = rand_image(31, &cfg);
        let annots = binary_annotations(32, &cfg);
        let weights = LossWeights::default();
        let eps_ged: Vec<Tensor> = (0..4).map(|i| eps(40 + i, 6)).collect();

        let mut tape = Tape::new();
        let (_, report) = total_loss_phase1(
            &mut tape, &model, &params, &weights, &x, &annots, 1, &eps(39, 6), &eps_ged, true,
        )
        .unwrap();
        let resum = report.seg
            + weights.lambda_kl * report.kl
            + weights.lambda_harm * report.harm
            + weights.lambda_ged * report.ged;
        assert!((report.total - resum).abs() < 1e-12);
        assert!(report.total.is_finite());
    }

    #[test]
    fn phase1_with_zero_weights_is_pure_seg() {
        let cfg = small_config();
        let (model, params) = HarmonizerModel::new(cfg.clone(), 22).unwrap();
        let x = rand_image(33, &cfg);
        let annots = binary_annotations(34, &cfg);
        let weights = LossWeights {
            lambda_kl: 0.0,
            lambda_harm: 0.0,
            lambda_ged: 0.0,
            dice_ce_mix: 0.5,
        };
        let eps_ged: Vec<Tensor> = (0..2).map(|i| eps(50 + i, 6)).collect();
        let mut tape = Tape::new();
        let (_, report) = total_loss_phase1(
            &mut tape, &model, &params, &weights, &x, &annots, 0, &eps(49, 6), &eps_ged, true,
        )
        .unwrap();
        assert_eq!(report.total, report.seg);
    }

    #[test]
    fn matched_posterior_gives_zero_kl_and_zero_harm() {
        // Copy the prior weights into the posterior (zeroing the extra mask
        // input channel): q(z|x,A) == p(z|x) for every annotation, so the KL
        // term vanishes; zero-init harmonizer heads keep the penalty at zero.
        let cfg = small_config();
        let (model, mut params) = HarmonizerModel::new(cfg.clone(), 23).unwrap();
        for (id, entry) in params.iter().map(|(i, e)| (i, e.name.clone())).collect::<Vec<_>>() {
            if let Some(rest) = entry.strip_prefix("prior.") {
                let post_id = params.id(&format!("posterior.{rest}")).unwrap();
                let src = params.value(id).clone();
                if rest == "enc.1.conv1.w" {
                    // Posterior first conv sees [image, mask]; zero the mask
                    // channel and copy the image channel.
                    let dst = params.value_mut(post_id);
                    let (c_out, k2) = (dst.shape()[0], 9);
                    dst.data_mut().fill(0.0);
                    for oc in 0..c_out {
                        for t in 0..k2 {
                            let v = src.data()[oc * k2 + t];
                            dst.data_mut()[oc * 2 * k2 + t] = v;
                        }
                    }
                } else {
                    *params.value_mut(post_id) = src;
                }
            }
        }

        let x = rand_image(35, &cfg);
        let annots = binary_annotations(36, &cfg);
        let eps_ged: Vec<Tensor> = (0..2).map(|i| eps(60 + i, 6)).collect();
        let mut tape = Tape::new();
        let (_, report) = total_loss_phase1(
            &mut tape,
            &model,
            &params,
            &LossWeights::default(),
            &x,
            &annots,
            2,
            &eps(59, 6),
            &eps_ged,
            true,
        )
        .unwrap();
        assert_eq!(report.kl, 0.0, "matched posterior must give exactly zero KL");
        assert_eq!(report.harm, 0.0, "zero-init harmonizer must give exactly zero penalty");
    }

    #[test]
    fn phase2_loss_is_additive_over_raters() {
        let cfg = small_config();
        let (model, params) = HarmonizerModel::new(cfg.clone(), 24).unwrap();
        let x = rand_image(37, &cfg);
        let annots = binary_annotations(38, &cfg);
        let bank = PriorBank::new(
            Tensor::new(vec![8, 6], uniform_vec(&mut rng_from_seed(70), 48, -1.0, 1.0)).unwrap(),
        )
        .unwrap();
        let draws: Vec<Tensor> = (0..2).map(|i| eps(71 + i, 6)).collect();

        let mut tape = Tape::new();
        let (loss, per_rater) = phase2_loss(
            &mut tape,
            &model,
            &params,
            &LossWeights::default(),
            &x,
            &annots,
            &bank,
            &draws,
            true,
        )
        .unwrap();
        let total = tape.value(loss).item().unwrap();
        let sum: f64 = per_rater.iter().sum();
        assert!((total - sum).abs() < 1e-9, "loss {total} vs per-rater sum {sum}");
        assert_eq!(per_rater.len(), 4);
        assert!(per_rater.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn phase2_draw_count_converges_in_mean() {
        // Averaging over more prior draws estimates the same expectation:
        // the S=1 estimator averaged over many seeds approaches the S=8
        // estimate.
        let cfg = small_config();
        let (model, params) = HarmonizerModel::new(cfg.clone(), 25).unwrap();
        let x = rand_image(41, &cfg);
        let annots = binary_annotations(42, &cfg);
        let bank = PriorBank::new(
            Tensor::new(vec![4, 6], uniform_vec(&mut rng_from_seed(80), 24, -1.0, 1.0)).unwrap(),
        )
        .unwrap();

        let eval = |draws: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let (loss, _) = phase2_loss(
                &mut tape,
                &model,
                &params,
                &LossWeights::default(),
                &x,
                &annots,
                &bank,
                draws,
                true,
            )
            .unwrap();
            tape.value(loss).item().unwrap()
        };

        let mut singles = Vec::new();
        for i in 0..40 {
            singles.push(eval(&[eps(200 + i, 6)]));
        }
        let mean_single: f64 = singles.iter().sum::<f64>() / singles.len() as f64;

        let batch: Vec<Tensor> = (0..8).map(|i| eps(300 + i, 6)).collect();
        let mean_batch = eval(&batch);

        // Both estimate E_z[sum_i seg_i]; agreement within a loose MC bound.
        let spread = singles
            .iter()
            .map(|v| (v - mean_single).abs())
            .fold(0.0f64, f64::max)
            .max(1e-3);
        assert!(
            (mean_single - mean_batch).abs() < spread,
            "S=1 mean {mean_single} vs S=8 {mean_batch}, spread {spread}"
        );
    }
}
